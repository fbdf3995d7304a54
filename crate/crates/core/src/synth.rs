//! Synthetic multimodal cohorts with planted class signal.
//!
//! Every column is Gaussian with standard deviation `noise`. Columns of a
//! planted block have mean `effect_size * class_means[y]`; all other columns
//! have mean zero. Each non-exempt modality goes missing per subject with its
//! own Bernoulli rate. A subject whose draws leave nothing available gets its
//! first modality back, so every record has at least one modality.
//!
//! The manifest carries a Monte-Carlo estimate of the Bayes accuracy: the
//! posterior under the known generative model, using only the planted columns
//! the subject actually has, with ties broken to the lowest class index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnSpec, Cohort, FeatureSchema, ModalitySpec, RegionSpec, SubjectRecord};
use crate::error::{Error, Result};

/// Meso-scale region labels used by the default specification.
pub const DEFAULT_REGIONS: [&str; 14] = [
    "Temporal",
    "Subcortical Temporal",
    "Ventricular",
    "Brainstem",
    "Striatum/Basal Ganglia",
    "Corpus Callosum White Matter",
    "Frontal",
    "Parietal",
    "Occipital",
    "Cingulate",
    "Insular",
    "Thalamic",
    "Cerebellar",
    "Limbic",
];

/// Stream used by the Monte-Carlo estimate, kept apart from the data stream.
const MC_STREAM: u64 = 0x6d63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    pub name: String,
    pub regions: Vec<String>,
    pub columns_per_region: usize,
    #[serde(default)]
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBlock {
    pub modality: String,
    pub region: String,
    /// Per-class mean before scaling by the effect size.
    pub class_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub classes: Vec<String>,
    /// Relative class frequencies; normalized internally.
    pub class_proportions: Vec<f64>,
    pub modalities: Vec<SynthModality>,
    pub planted: Vec<PlantedBlock>,
    pub effect_size: f64,
    pub noise: f64,
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
}

fn default_mc_draws() -> usize {
    100_000
}

impl Default for SynthSpec {
    /// Two imaging modalities with 14 regions of 3 columns each plus six
    /// demographic columns (29 blocks), 1200 subjects in three balanced
    /// classes, 10% missingness per imaging modality. PET carries the stronger
    /// signal and separates the later classes; MRI separates the first class
    /// from the other two.
    fn default() -> Self {
        let regions: Vec<String> = DEFAULT_REGIONS.iter().map(|s| s.to_string()).collect();
        let imaging = |name: &str| SynthModality {
            name: name.into(),
            regions: regions.clone(),
            columns_per_region: 3,
            missing_rate: 0.1,
        };
        let plant = |m: &str, r: &str, means: [f64; 3]| PlantedBlock {
            modality: m.into(),
            region: r.into(),
            class_means: means.to_vec(),
        };
        SynthSpec {
            n_subjects: 1200,
            classes: vec!["CN".into(), "MCI".into(), "AD".into()],
            class_proportions: vec![1.0, 1.0, 1.0],
            modalities: vec![
                imaging("MRI"),
                imaging("PET"),
                SynthModality {
                    name: "Demographic".into(),
                    regions: vec!["Demographics".into()],
                    columns_per_region: 6,
                    missing_rate: 0.0,
                },
            ],
            planted: vec![
                plant("PET", "Temporal", [0.0, 0.5, 1.5]),
                plant("PET", "Cingulate", [0.0, 0.5, 1.5]),
                plant("MRI", "Subcortical Temporal", [0.0, -1.0, -1.0]),
                plant("MRI", "Ventricular", [0.0, 1.0, 1.0]),
            ],
            effect_size: 0.5,
            noise: 1.0,
            mc_draws: default_mc_draws(),
        }
    }
}

/// Identifier-safe column stem for a region name.
fn slug(s: &str) -> String {
    let mut out = String::new();
    for ch in s.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Resolved geometry of a planted block in the dense feature vector.
#[derive(Debug, Clone)]
struct Planted {
    modality: usize,
    columns: std::ops::Range<usize>,
    means: Vec<f64>,
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: SynthSpec = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !self.effect_size.is_finite() || self.effect_size < 0.0 {
            return bad(format!("effect_size must be a finite value >= 0, got {}", self.effect_size));
        }
        if !self.noise.is_finite() || self.noise <= 0.0 {
            return bad(format!("noise must be a finite value > 0, got {}", self.noise));
        }
        let c = self.classes.len();
        if c < 2 {
            return bad("need at least two classes".into());
        }
        if self.class_proportions.len() != c
            || self.class_proportions.iter().any(|p| !p.is_finite() || *p <= 0.0)
        {
            return bad("class_proportions needs one positive entry per class".into());
        }
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if self.modalities.is_empty() {
            return bad("need at least one modality".into());
        }
        for m in &self.modalities {
            if m.regions.is_empty() || m.columns_per_region == 0 {
                return bad(format!("modality '{}' has no columns", m.name));
            }
            if !(0.0..=1.0).contains(&m.missing_rate) {
                return bad(format!("missing_rate of '{}' must lie in [0, 1]", m.name));
            }
        }
        if self.mc_draws == 0 {
            return bad("mc_draws must be positive".into());
        }
        self.resolve_planted().map(|_| ())
    }

    pub fn num_blocks(&self) -> usize {
        self.modalities.iter().map(|m| m.regions.len()).sum()
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            modalities: self
                .modalities
                .iter()
                .map(|m| ModalitySpec {
                    name: m.name.clone(),
                    regions: m
                        .regions
                        .iter()
                        .map(|r| RegionSpec {
                            name: r.clone(),
                            columns: (1..=m.columns_per_region)
                                .map(|j| ColumnSpec::Numeric(format!("{}_{}_{j}", slug(&m.name), slug(r))))
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
            label_column: "label".into(),
            id_column: "id".into(),
            classes: self.classes.clone(),
        }
    }

    fn resolve_planted(&self) -> Result<Vec<Planted>> {
        let mut out = Vec::new();
        for p in &self.planted {
            if p.class_means.len() != self.classes.len() {
                return Err(Error::InvalidConfig(format!(
                    "planted block {}/{} needs one mean per class",
                    p.modality, p.region
                )));
            }
            let mut offset = 0;
            let mut found = None;
            for (mi, m) in self.modalities.iter().enumerate() {
                for r in &m.regions {
                    if m.name == p.modality && *r == p.region {
                        found = Some(Planted {
                            modality: mi,
                            columns: offset..offset + m.columns_per_region,
                            means: p.class_means.clone(),
                        });
                    }
                    offset += m.columns_per_region;
                }
            }
            out.push(found.ok_or_else(|| {
                Error::InvalidConfig(format!("planted block {}/{} is not among the synthetic modalities", p.modality, p.region))
            })?);
        }
        Ok(out)
    }

    fn priors(&self) -> Vec<f64> {
        let s: f64 = self.class_proportions.iter().sum();
        self.class_proportions.iter().map(|p| p / s).collect()
    }

    /// Exact class sizes: floor of the share, remainders to the largest fractional parts.
    fn class_sizes(&self) -> Vec<usize> {
        let n = self.n_subjects as f64;
        let shares: Vec<f64> = self.priors().iter().map(|p| p * n).collect();
        let mut sizes: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())));
        let short = self.n_subjects - sizes.iter().sum::<usize>();
        for &c in order.iter().take(short) {
            sizes[c] += 1;
        }
        sizes
    }
}

fn draw_availability(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut available: Vec<bool> = spec
        .modalities
        .iter()
        .map(|m| !rng.random_bool(m.missing_rate))
        .collect();
    if !available.iter().any(|a| *a) {
        available[0] = true;
    }
    available
}

/// Rounds to six decimals so the CSV stays compact and reloads exactly.
fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSummary {
    pub modality: String,
    pub region: String,
    pub class_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub planted_blocks: Vec<PlantedSummary>,
    pub bayes_accuracy_mc: f64,
    pub majority_rate: f64,
    pub seed: u64,
    pub spec: SynthSpec,
}

impl SynthManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Whether expert `(modality, region)` carries planted signal.
    pub fn is_planted(&self, modality: &str, region: &str) -> bool {
        self.planted_blocks.iter().any(|p| p.modality == modality && p.region == region)
    }
}

/// Generates a cohort and its ground-truth manifest.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<(Cohort, SynthManifest)> {
    spec.validate()?;
    let planted = spec.resolve_planted()?;
    let schema = spec.schema();
    let d: usize = spec.modalities.iter().map(|m| m.regions.len() * m.columns_per_region).sum();
    let mut col_mean = vec![vec![0.0; spec.classes.len()]; d];
    for p in &planted {
        for j in p.columns.clone() {
            for (c, m) in p.means.iter().enumerate() {
                col_mean[j][c] = spec.effect_size * m;
            }
        }
    }
    let mut col_modality = Vec::with_capacity(d);
    for (mi, m) in spec.modalities.iter().enumerate() {
        col_modality.extend(std::iter::repeat_n(mi, m.regions.len() * m.columns_per_region));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = spec
        .class_sizes()
        .iter()
        .enumerate()
        .flat_map(|(c, n)| std::iter::repeat_n(c, *n))
        .collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let width = spec.n_subjects.to_string().len();
    let mut records = Vec::with_capacity(spec.n_subjects);
    for (i, &y) in labels.iter().enumerate() {
        let available = draw_availability(spec, &mut rng);
        let mut features = Vec::with_capacity(d);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(if available[col_modality[j]] {
                round6(col_mean[j][y] + spec.noise * z)
            } else {
                0.0
            });
        }
        records.push(SubjectRecord {
            id: format!("S{:0width$}", i + 1),
            features,
            available,
            label: y,
        });
    }
    let cohort = Cohort::new(schema, records)?;
    let priors = spec.priors();
    let manifest = SynthManifest {
        planted_blocks: spec
            .planted
            .iter()
            .map(|p| PlantedSummary {
                modality: p.modality.clone(),
                region: p.region.clone(),
                class_means: p.class_means.iter().map(|m| m * spec.effect_size).collect(),
            })
            .collect(),
        bayes_accuracy_mc: bayes_accuracy_mc(spec, spec.mc_draws, seed)?,
        majority_rate: priors.iter().copied().fold(0.0, f64::max),
        seed,
        spec: spec.clone(),
    };
    Ok((cohort, manifest))
}

/// Monte-Carlo accuracy of the Bayes-optimal classifier under `spec`.
pub fn bayes_accuracy_mc(spec: &SynthSpec, draws: usize, seed: u64) -> Result<f64> {
    spec.validate()?;
    let planted = spec.resolve_planted()?;
    let priors = spec.priors();
    let log_prior: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    let c = priors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MC_STREAM);
    let inv_var = 1.0 / (spec.noise * spec.noise);
    let mut hits = 0usize;
    let mut score = vec![0.0; c];
    for _ in 0..draws {
        let u: f64 = rng.random();
        let mut y = c - 1;
        let mut acc = 0.0;
        for (k, p) in priors.iter().enumerate() {
            acc += p;
            if u < acc {
                y = k;
                break;
            }
        }
        let available = draw_availability(spec, &mut rng);
        score.copy_from_slice(&log_prior);
        for p in &planted {
            if !available[p.modality] {
                continue;
            }
            for _ in p.columns.clone() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = spec.effect_size * p.means[y] + spec.noise * z;
                for (k, s) in score.iter_mut().enumerate() {
                    let dev = x - spec.effect_size * p.means[k];
                    *s -= 0.5 * dev * dev * inv_var;
                }
            }
        }
        let mut best = 0;
        for k in 1..c {
            if score[k] > score[best] {
                best = k;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / draws as f64)
}
