use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use regional_moe::data::{load_cohort, load_schema, write_cohort, Cohort};
use regional_moe::error::{Error, Result};
use regional_moe::experiment::{
    ablation_csv, bundle_expert_labels, explain, fit, predictions_csv, run_ablation, run_cv, AblationMode,
    ExperimentConfig, LossSettings,
};
use regional_moe::models::{ModelBundle, ModelKind, ModelSpec};
use regional_moe::moe::GateMode;
use regional_moe::objectives::ClassWeighting;
use regional_moe::optim::AdamWConfig;
use regional_moe::synth::{generate, SynthSpec};
use regional_moe::train::TrainConfig;

#[derive(Parser)]
#[command(name = "regional-moe", version, about = "Regional mixture-of-experts classification for multimodal tabular cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted signal.
    Synth(SynthArgs),
    /// Train one model on a whole cohort and save the bundle.
    Train(RunArgs),
    /// K-fold cross-validation with reports.
    Cv(RunArgs),
    /// Retrain under ablation modes on a shared fold plan.
    Ablate(AblateArgs),
    /// Gate attribution of a trained bundle over a cohort.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic-cohort specification; the built-in default when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the synthetic cohort's effect size.
    #[arg(long)]
    effect_size: Option<f64>,
    /// Overrides the synthetic cohort's subject count.
    #[arg(long)]
    n_subjects: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Subdirectory of --out; derived from the command, model and seed when omitted.
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    opts: ModelOpts,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated modes: full, drop:<modality>, only:<modality>, topk:<k>,
    /// modality-gate, region-gate. Defaults to the standard suite.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<String>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Model bundle JSON written by `train` or `cv`.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelOpts {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mref")]
    model: ModelKind,
    #[arg(long, default_value = "hier")]
    gate_mode: GateMode,
    #[arg(long)]
    top_k: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    k_folds: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda_sparsity: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda_diversity: f64,
    #[arg(long, default_value = "balanced")]
    class_weighting: ClassWeighting,
}

impl ModelOpts {
    fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec {
                kind: self.model,
                gate_mode: self.gate_mode,
                top_k: self.top_k,
                hidden: self.hidden.clone(),
            },
            train: TrainConfig {
                max_epochs: self.epochs,
                patience: self.patience,
                batch_size: self.batch_size,
                val_fraction: self.val_fraction,
                seed: self.seed,
                optimizer: AdamWConfig {
                    lr: self.lr,
                    weight_decay: self.weight_decay,
                    ..Default::default()
                },
            },
            loss: LossSettings {
                class_weighting: self.class_weighting,
                lambda_sparsity: self.lambda_sparsity,
                lambda_diversity: self.lambda_diversity,
            },
            k_folds: self.k_folds,
            seed: self.seed,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn load(args: &RunArgs) -> Result<(Cohort, ExperimentConfig, PathBuf)> {
    let cfg = args.opts.config();
    cfg.validate()?;
    let schema = load_schema(&args.schema)?;
    let cohort = load_cohort(&args.data, &schema)?;
    Ok((cohort, cfg, args.out.clone()))
}

fn run_dir(args: &RunArgs, command: &str) -> PathBuf {
    let id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{command}-{}-seed{}", args.opts.model, args.opts.seed));
    args.out.join(id)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            SynthSpec::from_json(&text)?
        }
        None => SynthSpec::default(),
    };
    if let Some(e) = args.effect_size {
        spec.effect_size = e;
    }
    if let Some(n) = args.n_subjects {
        spec.n_subjects = n;
    }
    let (cohort, manifest) = generate(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_cohort(args.out.join("cohort.csv"), &cohort)?;
    write(&args.out.join("schema.json"), &(serde_json::to_string_pretty(&cohort.schema)? + "\n"))?;
    write(&args.out.join("manifest.json"), &manifest.to_json()?)?;
    println!(
        "subjects={} blocks={} planted={} bayes_accuracy_mc={:.4} majority_rate={:.4}",
        cohort.records.len(),
        cohort.layout.num_blocks(),
        manifest.planted_blocks.len(),
        manifest.bayes_accuracy_mc,
        manifest.majority_rate
    );
    Ok(())
}

fn train_cmd(args: RunArgs) -> Result<()> {
    let (cohort, cfg, _) = load(&args)?;
    let dir = run_dir(&args, "train");
    let (bundle, trace) = fit(&cohort, &cohort.records, &cfg, cfg.seed)?;
    write(&dir.join("model.json"), &bundle.to_json()?)?;
    write(&dir.join("trace.csv"), &trace.to_csv())?;
    println!(
        "epochs={} best_epoch={} best_val_loss={:.6} bundle={}",
        trace.stopped_epoch,
        trace.best_epoch.map_or("none".into(), |e| e.to_string()),
        trace.best_val_loss().unwrap_or(f64::NAN),
        dir.join("model.json").display()
    );
    Ok(())
}

fn cv_cmd(args: RunArgs) -> Result<()> {
    let (cohort, cfg, _) = load(&args)?;
    let dir = run_dir(&args, "cv");
    let result = run_cv(&cohort, &cfg)?;
    let run_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    result.write(&dir, &run_id, &cohort)?;
    let s = &result.summary;
    println!(
        "auroc_macro={} accuracy={} f1_macro={} out={}",
        s.auroc_macro,
        s.accuracy,
        s.f1_macro,
        dir.display()
    );
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let (cohort, cfg, _) = load(&args.run)?;
    let dir = run_dir(&args.run, "ablate");
    let modes = if args.modes.is_empty() {
        AblationMode::standard_suite(&cohort)
    } else {
        args.modes.iter().map(|m| m.parse()).collect::<Result<Vec<AblationMode>>>()?
    };
    let rows = run_ablation(&cohort, &cfg, &modes)?;
    let table = ablation_csv(&rows);
    write(&dir.join("ablation.csv"), &table)?;
    for r in &rows {
        let sub = dir.join("modes").join(r.mode.to_string().replace(':', "_"));
        write(&sub.join("metrics.csv"), &r.result.summary.to_csv())?;
    }
    print!("{table}");
    Ok(())
}

fn explain_cmd(args: ExplainArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.bundle)?;
    let cohort = load_cohort(&args.data, &bundle.schema)?;
    let (table, preds) = explain(&bundle, &cohort)?;
    write(&args.out.join("attribution.csv"), &table.to_csv())?;
    let labels = bundle_expert_labels(&bundle);
    write(
        &args.out.join("gates_per_subject.csv"),
        &predictions_csv(&preds, &cohort.schema.classes, labels.as_deref()),
    )?;
    for m in &table.modalities {
        println!("{}={:.4}", m.modality, m.mean_weight);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Explain(a) => explain_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
