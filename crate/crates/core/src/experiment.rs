//! Cross-validation, ablations and gate attribution reports.
//!
//! Every fold fits normalization on its training rows only, trains from a
//! fresh initialization seeded with `seed ^ fold`, and scores its held-out
//! rows. Attribution averages the final (masked, sparsified) gate weights of
//! held-out subjects, so each subject contributes exactly once per run.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{stratified_kfold, Cohort, FoldPlan, NormStats, SubjectRecord};
use crate::error::{Error, Result};
use crate::metrics::{argmax, EvalResult, FoldSummary};
use crate::models::{AnyModel, ModelBundle, ModelKind, ModelSpec};
use crate::moe::GateMode;
use crate::objectives::{class_weights_from_counts, ClassWeighting, LossConfig};
use crate::train::{train, TrainConfig, TrainTrace, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub class_weighting: ClassWeighting,
    pub lambda_sparsity: f64,
    pub lambda_diversity: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            class_weighting: ClassWeighting::Balanced,
            lambda_sparsity: 0.01,
            lambda_diversity: 0.01,
        }
    }
}

impl LossSettings {
    /// Resolves class weights from training-fold labels.
    pub fn resolve(&self, train_labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<LossConfig> {
        let weights = match self.class_weighting {
            ClassWeighting::Balanced => {
                class_weights_from_counts(&crate::data::class_counts(train_labels, num_classes))?
            }
            ClassWeighting::None => vec![1.0; num_classes],
        };
        LossConfig::new(weights, self.lambda_sparsity, self.lambda_diversity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub loss: LossSettings,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            loss: LossSettings::default(),
            k_folds: 10,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::InvalidConfig(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        self.train.validate()?;
        LossConfig::new(vec![1.0], self.loss.lambda_sparsity, self.loss.lambda_diversity)?;
        if self.model.kind != ModelKind::Mref
            && (self.model.top_k.is_some() || self.model.gate_mode != GateMode::Hierarchical)
        {
            return Err(Error::InvalidConfig(format!(
                "gate mode and top-k only apply to the mref model, not '{}'",
                self.model.kind
            )));
        }
        Ok(())
    }
}

/// One held-out prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub id: String,
    pub fold: usize,
    pub label: usize,
    pub probs: Vec<f64>,
    /// Final per-expert gate weights; mixture models only.
    pub gate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAttribution {
    pub modality: String,
    pub region: String,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAttribution {
    pub modality: String,
    pub mean_weight: f64,
}

/// Mean gate weight per expert and per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub n_subjects: usize,
    pub experts: Vec<ExpertAttribution>,
    pub modalities: Vec<ModalityAttribution>,
}

impl AttributionTable {
    /// Averages gate vectors; `labels` gives `(modality, region)` per expert.
    pub fn from_gates<'a>(
        labels: &[(String, String)],
        gates: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Self> {
        let mut sum = vec![0.0; labels.len()];
        let mut n = 0usize;
        for g in gates {
            if g.len() != labels.len() {
                return Err(Error::dims("gate vector", labels.len(), g.len()));
            }
            for (s, w) in sum.iter_mut().zip(g) {
                *s += w;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyInput("attribution needs at least one subject"));
        }
        let experts: Vec<ExpertAttribution> = labels
            .iter()
            .zip(&sum)
            .map(|((m, r), s)| ExpertAttribution {
                modality: m.clone(),
                region: r.clone(),
                mean_weight: s / n as f64,
            })
            .collect();
        let mut modalities: Vec<ModalityAttribution> = Vec::new();
        for e in &experts {
            match modalities.iter_mut().find(|m| m.modality == e.modality) {
                Some(m) => m.mean_weight += e.mean_weight,
                None => modalities.push(ModalityAttribution {
                    modality: e.modality.clone(),
                    mean_weight: e.mean_weight,
                }),
            }
        }
        Ok(AttributionTable {
            n_subjects: n,
            experts,
            modalities,
        })
    }

    /// Expert indices ordered by decreasing weight; ties keep expert order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.experts.len()).collect();
        idx.sort_by(|&a, &b| self.experts[b].mean_weight.total_cmp(&self.experts[a].mean_weight));
        idx
    }

    /// `level,modality,region,mean_weight,rank`; modality rows leave region and rank empty.
    pub fn to_csv(&self) -> String {
        let mut rank = vec![0; self.experts.len()];
        for (r, i) in self.ranking().into_iter().enumerate() {
            rank[i] = r + 1;
        }
        let mut out = String::from("level,modality,region,mean_weight,rank\n");
        for (e, r) in self.experts.iter().zip(rank) {
            let _ = writeln!(out, "expert,{},{},{:?},{r}", csv_field(&e.modality), csv_field(&e.region), e.mean_weight);
        }
        for m in &self.modalities {
            let _ = writeln!(out, "modality,{},,{:?},", csv_field(&m.modality), m.mean_weight);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn expert_labels(model: &AnyModel) -> Option<Vec<(String, String)>> {
    model
        .as_moe()
        .map(|m| m.experts.iter().map(|e| (e.modality.clone(), e.region.clone())).collect())
}

/// Trained model and training trace for one fold.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub bundle: ModelBundle,
    pub trace: TrainTrace,
    pub eval: EvalResult,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub config: ExperimentConfig,
    pub summary: FoldSummary,
    pub folds: Vec<FoldRun>,
    /// Held-out predictions in cohort order.
    pub predictions: Vec<SubjectPrediction>,
    pub attribution: Option<AttributionTable>,
    pub class_names: Vec<String>,
}

/// Fold assignment for every record, taken from `plan` by subject id.
fn assign(cohort: &Cohort, plan: &FoldPlan) -> Result<Vec<usize>> {
    let by_id: HashMap<&str, usize> = plan
        .ids
        .iter()
        .zip(&plan.assignments)
        .map(|(i, f)| (i.as_str(), *f))
        .collect();
    cohort
        .records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("subject {} is missing from the fold plan", r.id)))
        })
        .collect()
}

pub fn fold_plan(cohort: &Cohort, cfg: &ExperimentConfig) -> Result<FoldPlan> {
    stratified_kfold(&cohort.records, cohort.schema.num_classes(), cfg.k_folds, cfg.seed)
}

/// Trains one model on `records` with normalization fitted on them.
pub fn fit(cohort: &Cohort, records: &[SubjectRecord], cfg: &ExperimentConfig, seed: u64) -> Result<(ModelBundle, TrainTrace)> {
    let c = cohort.schema.num_classes();
    let stats = NormStats::fit(records, &cohort.layout)?;
    let train_rows = stats.apply(records, &cohort.layout)?;
    let loss = cfg.loss.resolve(train_rows.iter().map(|r| r.label), c)?;
    let model = cfg.model.build(&cohort.layout, c, seed)?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (model, trace) = train(model, &train_rows, c, &tcfg, &loss)?;
    Ok((ModelBundle::new(cohort.schema.clone(), cfg.model.clone(), stats, model), trace))
}

/// Scores normalized records with a trained model.
pub fn predict(model: &AnyModel, records: &[SubjectRecord], fold: usize) -> Result<Vec<SubjectPrediction>> {
    records
        .iter()
        .map(|r| {
            let (probs, gate) = match model.as_moe() {
                Some(m) => {
                    let p = m.fuse_predict(r)?;
                    (p.class_probs, Some(p.gate.weights))
                }
                None => (model.class_probs(r)?, None),
            };
            Ok(SubjectPrediction {
                id: r.id.clone(),
                fold,
                label: r.label,
                probs,
                gate,
            })
        })
        .collect()
}

pub fn run_cv(cohort: &Cohort, cfg: &ExperimentConfig) -> Result<CvResult> {
    cfg.validate()?;
    let plan = fold_plan(cohort, cfg)?;
    run_cv_with_plan(cohort, cfg, &plan)
}

/// Cross-validation over a fixed fold plan, which may cover subjects absent from `cohort`.
pub fn run_cv_with_plan(cohort: &Cohort, cfg: &ExperimentConfig, plan: &FoldPlan) -> Result<CvResult> {
    cfg.validate()?;
    let c = cohort.schema.num_classes();
    let folds_of = assign(cohort, plan)?;
    let mut predictions: Vec<Option<SubjectPrediction>> = vec![None; cohort.records.len()];
    let mut folds = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
            (0..cohort.records.len()).partition(|&i| folds_of[i] == fold);
        if test_idx.is_empty() {
            continue;
        }
        let train_rows: Vec<SubjectRecord> = train_idx.iter().map(|&i| cohort.records[i].clone()).collect();
        let test_rows: Vec<SubjectRecord> = test_idx.iter().map(|&i| cohort.records[i].clone()).collect();
        let (bundle, trace) = fit(cohort, &train_rows, cfg, cfg.seed ^ fold as u64)?;
        let test_norm = bundle.norm_stats.apply(&test_rows, &cohort.layout)?;
        let preds = predict(&bundle.model, &test_norm, fold)?;
        let y: Vec<usize> = preds.iter().map(|p| p.label).collect();
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let eval = EvalResult::compute(fold, &y, &probs, c)?;
        for (p, &i) in preds.into_iter().zip(&test_idx) {
            predictions[i] = Some(p);
        }
        folds.push(FoldRun {
            fold,
            bundle,
            trace,
            eval,
        });
    }
    let predictions: Vec<SubjectPrediction> = predictions
        .into_iter()
        .map(|p| p.ok_or_else(|| Error::Data("a subject was never held out".into())))
        .collect::<Result<_>>()?;
    let attribution = match folds.first().and_then(|f| expert_labels(&f.bundle.model)) {
        Some(labels) => Some(AttributionTable::from_gates(
            &labels,
            predictions.iter().filter_map(|p| p.gate.as_deref()),
        )?),
        None => None,
    };
    let summary = FoldSummary::new(folds.iter().map(|f| f.eval.clone()).collect())?;
    Ok(CvResult {
        config: cfg.clone(),
        summary,
        folds,
        predictions,
        attribution,
        class_names: cohort.schema.classes.clone(),
    })
}

/// Per-subject predictions and gates:
/// `id,fold,label,predicted,p_<class>...,g_<modality>/<region>...`.
pub fn predictions_csv(
    predictions: &[SubjectPrediction],
    class_names: &[String],
    experts: Option<&[(String, String)]>,
) -> String {
    let mut out = String::from("id,fold,label,predicted");
    for c in class_names {
        let _ = write!(out, ",{}", csv_field(&format!("p_{c}")));
    }
    if let Some(ex) = experts {
        for (m, r) in ex {
            let _ = write!(out, ",{}", csv_field(&format!("g_{m}/{r}")));
        }
    }
    out.push('\n');
    for p in predictions {
        let _ = write!(
            out,
            "{},{},{},{}",
            csv_field(&p.id),
            p.fold,
            class_names[p.label],
            class_names[argmax(&p.probs)]
        );
        for v in &p.probs {
            let _ = write!(out, ",{v:?}");
        }
        if let Some(g) = &p.gate {
            for v in g {
                let _ = write!(out, ",{v:?}");
            }
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_id: String,
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub n_subjects: usize,
    pub class_counts: Vec<usize>,
    pub files: Vec<String>,
}

impl CvResult {
    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }

    /// Writes the full report tree into `dir` and returns the written file names.
    pub fn write(&self, dir: &Path, run_id: &str, cohort: &Cohort) -> Result<Vec<PathBuf>> {
        let mut files: Vec<(String, String)> = vec![
            ("metrics.csv".into(), self.summary.to_csv()),
            ("metrics.json".into(), self.metrics_json()?),
        ];
        let labels = self.folds.first().and_then(|f| expert_labels(&f.bundle.model));
        if let Some(a) = &self.attribution {
            files.push(("attribution.csv".into(), a.to_csv()));
        }
        files.push((
            "gates_per_subject.csv".into(),
            predictions_csv(&self.predictions, &self.class_names, labels.as_deref()),
        ));
        for f in &self.folds {
            files.push((format!("models/fold_{}.json", f.fold), f.bundle.to_json()?));
            files.push((format!("traces/fold_{}.csv", f.fold), f.trace.to_csv()));
        }
        let manifest = RunManifest {
            command: "cv".into(),
            run_id: run_id.into(),
            schema_version: crate::nn::SCHEMA_VERSION,
            config: self.config.clone(),
            n_subjects: cohort.records.len(),
            class_counts: cohort.class_counts(),
            files: files.iter().map(|(n, _)| n.clone()).collect(),
        };
        files.push(("manifest.json".into(), serde_json::to_string_pretty(&manifest)? + "\n"));
        let mut written = Vec::new();
        for (name, text) in files {
            let path = dir.join(&name);
            write_file(&path, &text)?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    Full,
    DropModality(String),
    OnlyModality(String),
    TopK(usize),
    ModalityOnlyGate,
    RegionOnlyGate,
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationMode::Full => f.write_str("full"),
            AblationMode::DropModality(m) => write!(f, "drop:{m}"),
            AblationMode::OnlyModality(m) => write!(f, "only:{m}"),
            AblationMode::TopK(k) => write!(f, "topk:{k}"),
            AblationMode::ModalityOnlyGate => f.write_str("modality-gate"),
            AblationMode::RegionOnlyGate => f.write_str("region-gate"),
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("unknown ablation mode '{s}'"));
        Ok(match s.split_once(':') {
            None => match s {
                "full" => AblationMode::Full,
                "modality-gate" => AblationMode::ModalityOnlyGate,
                "region-gate" => AblationMode::RegionOnlyGate,
                _ => return Err(bad()),
            },
            Some(("drop", m)) if !m.is_empty() => AblationMode::DropModality(m.into()),
            Some(("only", m)) if !m.is_empty() => AblationMode::OnlyModality(m.into()),
            Some(("topk", k)) => AblationMode::TopK(k.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        })
    }
}

impl AblationMode {
    /// The default sweep: full model, leave-one-modality-out, each modality
    /// alone, top-5/3/1 experts and both single-level gates.
    pub fn standard_suite(cohort: &Cohort) -> Vec<AblationMode> {
        let mut modes = vec![AblationMode::Full];
        let names: Vec<String> = cohort.schema.modalities.iter().map(|m| m.name.clone()).collect();
        if names.len() > 1 {
            modes.extend(names.iter().map(|m| AblationMode::DropModality(m.clone())));
            modes.extend(names.iter().map(|m| AblationMode::OnlyModality(m.clone())));
        }
        let n = cohort.layout.num_blocks();
        modes.extend([5, 3, 1].into_iter().filter(|k| *k < n).map(AblationMode::TopK));
        modes.push(AblationMode::ModalityOnlyGate);
        modes.push(AblationMode::RegionOnlyGate);
        modes
    }

    /// Cohort and configuration for this mode.
    pub fn apply(&self, cohort: &Cohort, cfg: &ExperimentConfig) -> Result<(Cohort, ExperimentConfig)> {
        let find = |name: &str| {
            cohort
                .schema
                .modality_index(name)
                .ok_or_else(|| Error::InvalidConfig(format!("modality '{name}' is not in the schema")))
        };
        let mut cfg = cfg.clone();
        let needs_moe = |cfg: &ExperimentConfig| {
            if cfg.model.kind != ModelKind::Mref {
                Err(Error::InvalidConfig(format!("ablation '{self}' needs the mref model")))
            } else {
                Ok(())
            }
        };
        let cohort = match self {
            AblationMode::Full => cohort.clone(),
            AblationMode::DropModality(m) => {
                let drop = find(m)?;
                let keep: Vec<usize> = (0..cohort.schema.modalities.len()).filter(|&i| i != drop).collect();
                if keep.is_empty() {
                    return Err(Error::InvalidConfig(format!("cannot drop '{m}', the only modality")));
                }
                cohort.restrict_modalities(&keep)?
            }
            AblationMode::OnlyModality(m) => cohort.restrict_modalities(&[find(m)?])?,
            AblationMode::TopK(k) => {
                needs_moe(&cfg)?;
                cfg.model.top_k = Some(*k);
                cohort.clone()
            }
            AblationMode::ModalityOnlyGate => {
                needs_moe(&cfg)?;
                cfg.model.gate_mode = GateMode::ModalityOnly;
                cohort.clone()
            }
            AblationMode::RegionOnlyGate => {
                needs_moe(&cfg)?;
                cfg.model.gate_mode = GateMode::RegionOnly;
                cohort.clone()
            }
        };
        Ok((cohort, cfg))
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub n_subjects: usize,
    pub result: CvResult,
}

/// Retrains every mode from scratch on one shared fold plan.
pub fn run_ablation(cohort: &Cohort, cfg: &ExperimentConfig, modes: &[AblationMode]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    // Resolve every mode before any training starts.
    let prepared = modes
        .iter()
        .map(|m| m.apply(cohort, cfg).map(|p| (m.clone(), p)))
        .collect::<Result<Vec<_>>>()?;
    for (_, (_, c)) in &prepared {
        c.validate()?;
        if let Some(k) = c.model.top_k {
            if k == 0 || k > cohort.layout.num_blocks() {
                return Err(Error::InvalidConfig(format!(
                    "top-k must lie in 1..={}, got {k}",
                    cohort.layout.num_blocks()
                )));
            }
        }
    }
    let plan = fold_plan(cohort, cfg)?;
    prepared
        .into_iter()
        .map(|(mode, (sub, c))| {
            let result = run_cv_with_plan(&sub, &c, &plan)?;
            Ok(AblationRow {
                mode,
                n_subjects: sub.records.len(),
                result,
            })
        })
        .collect()
}

/// One row per mode with mean and SD of each metric and the AUROC change from `full`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let full = rows
        .iter()
        .find(|r| r.mode == AblationMode::Full)
        .map(|r| r.result.summary.auroc_macro.mean);
    let sd = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut out = String::from(
        "configuration,n_subjects,auroc_mean,auroc_sd,accuracy_mean,accuracy_sd,f1_mean,f1_sd,delta_auroc\n",
    );
    for r in rows {
        let s = &r.result.summary;
        let delta = full.map(|f| format!("{:?}", s.auroc_macro.mean - f)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:?},{},{:?},{},{:?},{},{}",
            csv_field(&r.mode.to_string()),
            r.n_subjects,
            s.auroc_macro.mean,
            sd(s.auroc_macro.sd),
            s.accuracy.mean,
            sd(s.accuracy.sd),
            s.f1_macro.mean,
            sd(s.f1_macro.sd),
            delta
        );
    }
    out
}

/// Gate attribution of a trained bundle over a raw cohort.
pub fn explain(bundle: &ModelBundle, cohort: &Cohort) -> Result<(AttributionTable, Vec<SubjectPrediction>)> {
    let layout = bundle.layout()?;
    if layout.feature_names != cohort.layout.feature_names
        || bundle.schema.modalities.len() != cohort.schema.modalities.len()
        || bundle.schema.classes != cohort.schema.classes
    {
        return Err(Error::Schema("cohort schema does not match the model bundle".into()));
    }
    let labels = expert_labels(&bundle.model)
        .ok_or_else(|| Error::InvalidConfig(format!("explain needs an mref bundle, got '{}'", bundle.spec.kind)))?;
    let rows = bundle.norm_stats.apply(&cohort.records, &layout)?;
    let preds = predict(&bundle.model, &rows, 0)?;
    let table = AttributionTable::from_gates(&labels, preds.iter().filter_map(|p| p.gate.as_deref()))?;
    Ok((table, preds))
}

/// Expert `(modality, region)` labels of a bundle, if it is a mixture model.
pub fn bundle_expert_labels(bundle: &ModelBundle) -> Option<Vec<(String, String)>> {
    expert_labels(&bundle.model)
}
