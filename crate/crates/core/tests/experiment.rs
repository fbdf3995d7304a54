use regional_moe::data::{Cohort, FeatureSchema, NormStats};
use regional_moe::experiment::{explain, fit, run_ablation, run_cv, AblationMode, ExperimentConfig};
use regional_moe::models::{ModelKind, ModelSpec};
use regional_moe::synth::{bayes_accuracy_mc, generate, PlantedBlock, SynthModality, SynthSpec};
use regional_moe::train::TrainConfig;
use regional_moe::ADNI_LIKE_SCHEMA;

fn small_spec(effect: f64, missing: f64) -> SynthSpec {
    let regions: Vec<String> = ["Temporal", "Frontal", "Parietal", "Occipital"].iter().map(|s| s.to_string()).collect();
    let modality = |name: &str| SynthModality {
        name: name.into(),
        regions: regions.clone(),
        columns_per_region: 2,
        missing_rate: missing,
    };
    SynthSpec {
        n_subjects: 300,
        modalities: vec![modality("A"), modality("B")],
        planted: vec![
            PlantedBlock {
                modality: "A".into(),
                region: "Temporal".into(),
                class_means: vec![0.0, 1.0, 2.0],
            },
            PlantedBlock {
                modality: "A".into(),
                region: "Frontal".into(),
                class_means: vec![0.0, -1.0, -2.0],
            },
        ],
        effect_size: effect,
        mc_draws: 1000,
        ..SynthSpec::default()
    }
}

fn quick_config(kind: ModelKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec {
            kind,
            hidden: vec![8],
            ..ModelSpec::default()
        },
        train: TrainConfig {
            max_epochs: 15,
            patience: 5,
            seed,
            ..TrainConfig::default()
        },
        k_folds: 5,
        seed,
        ..ExperimentConfig::default()
    }
}

fn cohort(spec: &SynthSpec, seed: u64) -> Cohort {
    generate(spec, seed).expect("cohort").0
}

#[test]
fn bundled_schema_has_29_experts_and_matches_the_generator() {
    let schema = FeatureSchema::from_json(ADNI_LIKE_SCHEMA).unwrap();
    assert_eq!(schema.layout().unwrap().num_blocks(), 29);
    assert_eq!(schema, SynthSpec::default().schema());
}

#[test]
fn top_n_equals_full_exactly() {
    let c = cohort(&small_spec(1.0, 0.1), 4);
    let n = c.layout.num_blocks();
    let rows = run_ablation(&c, &quick_config(ModelKind::Mref, 4), &[AblationMode::Full, AblationMode::TopK(n)]).unwrap();
    assert_eq!(rows[0].result.summary, rows[1].result.summary);
    assert_eq!(rows[0].result.predictions, rows[1].result.predictions);
    assert_eq!(rows[0].result.attribution, rows[1].result.attribution);
}

#[test]
fn signal_modality_alone_beats_the_other_alone() {
    let spec = small_spec(1.0, 0.0);
    let mut gap = 0.0;
    for seed in 1..=5 {
        let c = cohort(&spec, seed);
        let modes = [AblationMode::OnlyModality("A".into()), AblationMode::OnlyModality("B".into())];
        let mut cfg = quick_config(ModelKind::Mref, seed);
        cfg.train.max_epochs = 40;
        cfg.train.patience = 10;
        let rows = run_ablation(&c, &cfg, &modes).unwrap();
        gap += rows[0].result.summary.auroc_macro.mean - rows[1].result.summary.auroc_macro.mean;
    }
    gap /= 5.0;
    assert!(gap >= 0.2, "mean AUROC gap {gap}");
}

#[test]
fn ablation_modes_are_validated_before_training() {
    let c = cohort(&small_spec(1.0, 0.1), 5);
    let cfg = quick_config(ModelKind::Mref, 5);
    assert!(run_ablation(&c, &cfg, &[AblationMode::Full, AblationMode::DropModality("C".into())]).is_err());
    let single = c.restrict_modalities(&[0]).unwrap();
    assert!(run_ablation(&single, &cfg, &[AblationMode::DropModality("A".into())]).is_err());
    assert!(run_ablation(&c, &cfg, &[AblationMode::TopK(c.layout.num_blocks() + 1)]).is_err());
}

#[test]
fn concat_and_mref_train_on_identical_normalized_inputs() {
    let c = cohort(&small_spec(1.0, 0.2), 6);
    let (a, _) = fit(&c, &c.records, &quick_config(ModelKind::Mref, 6), 6).unwrap();
    let (b, _) = fit(&c, &c.records, &quick_config(ModelKind::Concat, 6), 6).unwrap();
    assert_eq!(a.norm_stats, b.norm_stats);
    assert_eq!(a.norm_stats, NormStats::fit(&c.records, &c.layout).unwrap());
    let r = &c.records[0];
    assert_eq!(a.normalize(r).unwrap(), b.normalize(r).unwrap());
}

#[test]
fn every_subject_is_held_out_once_and_attribution_is_a_simplex() {
    let c = cohort(&small_spec(1.0, 0.0), 7);
    let res = run_cv(&c, &quick_config(ModelKind::Mref, 7)).unwrap();
    let mut ids: Vec<&str> = res.predictions.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), c.records.len());
    assert_eq!(res.predictions.len(), c.records.len());
    assert_eq!(res.summary.folds.len(), 5);

    let table = res.attribution.unwrap();
    let total: f64 = table.experts.iter().map(|e| e.mean_weight).sum();
    assert!((total - 1.0).abs() < 1e-6);
    for m in &table.modalities {
        let members: f64 = table.experts.iter().filter(|e| e.modality == m.modality).map(|e| e.mean_weight).sum();
        assert!((members - m.mean_weight).abs() < 1e-9);
    }
}

#[test]
fn explain_on_one_subject_returns_its_gate() {
    let c = cohort(&small_spec(1.0, 0.3), 8);
    let (bundle, _) = fit(&c, &c.records, &quick_config(ModelKind::Mref, 8), 8).unwrap();
    let one = Cohort::new(c.schema.clone(), vec![c.records[3].clone()]).unwrap();
    let (table, preds) = explain(&bundle, &one).unwrap();
    let g = preds[0].gate.as_ref().unwrap();
    for (e, w) in table.experts.iter().zip(g) {
        assert_eq!(e.mean_weight, *w);
    }

    let (concat, _) = fit(&c, &c.records, &quick_config(ModelKind::Concat, 8), 8).unwrap();
    assert!(explain(&concat, &one).is_err());
    let other = cohort(&small_spec(1.0, 0.0), 8).restrict_modalities(&[1]).unwrap();
    assert!(explain(&bundle, &other).is_err());
}

#[test]
fn bayes_accuracy_estimate_is_stable_across_reruns() {
    let spec = SynthSpec {
        effect_size: 1.5,
        ..SynthSpec::default()
    };
    let a = bayes_accuracy_mc(&spec, 100_000, 1).unwrap();
    let b = bayes_accuracy_mc(&spec, 100_000, 2).unwrap();
    assert!((a - b).abs() <= 0.02, "{a} vs {b}");
    assert!(a > 1.0 / 3.0 && a <= 1.0);
}
