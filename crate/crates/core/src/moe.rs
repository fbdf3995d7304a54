//! Regional mixture of experts with flat or two-level gating.
//!
//! Each (modality, region) block owns an expert MLP that maps the block's
//! features to class logits. A gate produces non-negative expert weights on the
//! simplex; unavailable modalities are masked out and the remaining weights
//! renormalized, optionally followed by top-k sparsification. The prediction is
//! a softmax over the weighted sum of expert logits.
//!
//! Gate inputs:
//! * the flat and modality gates see every feature (zeros where unavailable)
//!   followed by one 0/1 availability flag per modality;
//! * the region gate of a modality sees that modality's features only.
//!
//! Modalities with a single region have no region gate; their region weight is 1.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Layout, SubjectRecord};
use crate::error::{Error, Result};
use crate::nn::{self, init_params_with, softmax, softmax_backward, ForwardCache, Mlp};
use crate::objectives::{self, LossBreakdown, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GateMode {
    #[serde(rename = "flat")]
    Flat,
    #[serde(rename = "modality")]
    ModalityOnly,
    #[serde(rename = "region")]
    RegionOnly,
    #[default]
    #[serde(rename = "hier")]
    Hierarchical,
}

impl std::str::FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(GateMode::Flat),
            "hier" | "hierarchical" => Ok(GateMode::Hierarchical),
            "modality" => Ok(GateMode::ModalityOnly),
            "region" => Ok(GateMode::RegionOnly),
            other => Err(Error::InvalidConfig(format!("unknown gate mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Flat => "flat",
            GateMode::Hierarchical => "hier",
            GateMode::ModalityOnly => "modality",
            GateMode::RegionOnly => "region",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub name: String,
    pub features: Range<usize>,
    pub experts: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_classes: usize,
    pub num_features: usize,
    pub modalities: Vec<ModalityInfo>,
    pub gate_mode: GateMode,
    pub top_k: Option<usize>,
    pub hidden: Vec<usize>,
}

impl MoeConfig {
    pub fn from_layout(
        layout: &Layout,
        num_classes: usize,
        gate_mode: GateMode,
        top_k: Option<usize>,
        hidden: &[usize],
    ) -> Result<Self> {
        let cfg = MoeConfig {
            num_classes,
            num_features: layout.num_features(),
            modalities: layout
                .modalities
                .iter()
                .map(|m| ModalityInfo {
                    name: m.name.clone(),
                    features: m.features.clone(),
                    experts: m.blocks.clone(),
                })
                .collect(),
            gate_mode,
            top_k,
            hidden: hidden.to_vec(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_experts(&self) -> usize {
        self.modalities.last().map_or(0, |m| m.experts.end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.modalities.is_empty() || self.num_experts() == 0 {
            return Err(Error::InvalidConfig("need at least one expert".into()));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.num_experts() {
                return Err(Error::InvalidConfig(format!(
                    "top_k must lie in 1..={}, got {k}",
                    self.num_experts()
                )));
            }
        }
        Ok(())
    }

    fn groups(&self) -> Vec<Range<usize>> {
        self.modalities.iter().map(|m| m.experts.clone()).collect()
    }

    fn modality_of_expert(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_experts()];
        for (j, m) in self.modalities.iter().enumerate() {
            out[m.experts.clone()].fill(j);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSlot {
    pub modality: String,
    pub region: String,
    pub features: Range<usize>,
    pub net: Mlp,
}

impl ExpertSlot {
    pub fn in_dim(&self) -> usize {
        self.features.len()
    }
}

/// Gate networks. Only the nets used by the configured mode are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTree {
    pub flat: Option<Mlp>,
    pub modality: Option<Mlp>,
    /// One entry per modality; `None` for single-region modalities.
    pub regions: Vec<Option<Mlp>>,
}

/// Expert weights plus their modality and within-modality summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub weights: Vec<f64>,
    pub modality_weights: Vec<f64>,
    pub region_weights: Vec<Vec<f64>>,
    pub active_mask: Vec<bool>,
    /// Expert index range of each modality.
    pub groups: Vec<Range<usize>>,
}

impl GateOutput {
    /// Builds a gate output from raw weights, deriving the summaries.
    pub fn from_weights(weights: Vec<f64>, groups: Vec<Range<usize>>) -> Self {
        let active_mask = weights.iter().map(|w| *w > 0.0).collect();
        let mut g = GateOutput {
            modality_weights: vec![0.0; groups.len()],
            region_weights: groups.iter().map(|r| vec![0.0; r.len()]).collect(),
            weights,
            active_mask,
            groups,
        };
        g.rederive();
        g
    }

    fn rederive(&mut self) {
        for (j, range) in self.groups.iter().enumerate() {
            let total: f64 = self.weights[range.clone()].iter().sum();
            self.modality_weights[j] = total;
            if total > 0.0 {
                for (r, m) in range.clone().enumerate() {
                    self.region_weights[j][r] = self.weights[m] / total;
                }
            }
        }
    }
}

/// Zeroes unavailable experts and rescales the rest to sum to one.
/// Returns the input unchanged when every expert is available.
pub fn mask_renormalize(g: &GateOutput, availability: &[bool]) -> Result<GateOutput> {
    if availability.len() != g.weights.len() {
        return Err(Error::dims("expert availability", g.weights.len(), availability.len()));
    }
    if availability.iter().all(|a| *a) {
        return Ok(g.clone());
    }
    let total: f64 = g
        .weights
        .iter()
        .zip(availability)
        .filter(|(_, a)| **a)
        .map(|(w, _)| w)
        .sum();
    if !availability.iter().any(|a| *a) || total <= 0.0 {
        return Err(Error::NoAvailableExperts);
    }
    let mut out = g.clone();
    for (m, a) in availability.iter().enumerate() {
        if *a {
            out.weights[m] = g.weights[m] / total;
        } else {
            out.weights[m] = 0.0;
            out.active_mask[m] = false;
        }
    }
    out.rederive();
    Ok(out)
}

/// Keeps the `k` largest active weights (ties to the lowest index) and renormalizes.
/// A `k` at or above the number of active experts returns the input unchanged.
pub fn topk_sparsify(g: &GateOutput, k: usize) -> Result<GateOutput> {
    if k == 0 {
        return Err(Error::InvalidConfig("top-k requires k >= 1".into()));
    }
    let selected = topk_selection(&g.weights, &g.active_mask, k);
    if selected.iter().zip(&g.active_mask).all(|(s, a)| s == a) {
        return Ok(g.clone());
    }
    let total: f64 = g.weights.iter().zip(&selected).filter(|(_, s)| **s).map(|(w, _)| w).sum();
    let mut out = g.clone();
    for (m, s) in selected.iter().enumerate() {
        if *s {
            out.weights[m] = g.weights[m] / total;
        } else {
            out.weights[m] = 0.0;
            out.active_mask[m] = false;
        }
    }
    out.rederive();
    Ok(out)
}

fn topk_selection(weights: &[f64], active: &[bool], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..weights.len()).filter(|&m| active[m]).collect();
    if order.len() <= k {
        return active.to_vec();
    }
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut keep = vec![false; weights.len()];
    order.iter().take(k).for_each(|&m| keep[m] = true);
    keep
}

/// Everything produced by one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub fused_logits: Vec<f64>,
    pub gate: GateOutput,
    pub expert_logits: Vec<Vec<f64>>,
}

/// Softmax factors of the gate before masking.
#[derive(Debug, Clone, Default)]
struct GateFactors {
    flat: Option<(Vec<f64>, Option<ForwardCache>)>,
    modality: Option<(Vec<f64>, Option<ForwardCache>)>,
    regions: Vec<Option<(Vec<f64>, Option<ForwardCache>)>>,
}

/// Forward pass with caches retained for [`MoeModel::backward`].
#[derive(Debug, Clone)]
pub struct MoeTrace {
    pub prediction: Prediction,
    expert_caches: Vec<ForwardCache>,
    factors: GateFactors,
    /// Availability combined with the top-k selection.
    selection: Vec<bool>,
    /// Pre-mask gate weights.
    raw: Vec<f64>,
    /// Per-expert availability, used by the diversity penalty.
    available: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: MoeConfig,
    pub experts: Vec<ExpertSlot>,
    pub gates: GateTree,
}

impl MoeModel {
    /// Glorot-initialized model. Experts first, then gates, from one ChaCha8 stream.
    pub fn init(layout: &Layout, config: MoeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if layout.num_features() != config.num_features {
            return Err(Error::dims("layout features", config.num_features, layout.num_features()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.num_classes;
        let mut experts = Vec::with_capacity(layout.num_blocks());
        for b in &layout.blocks {
            experts.push(ExpertSlot {
                modality: layout.modalities[b.modality].name.clone(),
                region: b.region.clone(),
                features: b.features.clone(),
                net: init_params_with(b.features.len(), &config.hidden, c, &mut rng)?,
            });
        }
        let gate_in = config.num_features + config.modalities.len();
        let n = experts.len();
        let m = config.modalities.len();
        let mode = config.gate_mode;
        let flat = match mode {
            GateMode::Flat => Some(init_params_with(gate_in, &config.hidden, n, &mut rng)?),
            _ => None,
        };
        let modality = match mode {
            GateMode::Hierarchical | GateMode::ModalityOnly => {
                Some(init_params_with(gate_in, &config.hidden, m, &mut rng)?)
            }
            _ => None,
        };
        let mut regions = Vec::with_capacity(m);
        for info in &config.modalities {
            let wants = matches!(mode, GateMode::Hierarchical | GateMode::RegionOnly) && info.experts.len() > 1;
            regions.push(if wants {
                Some(init_params_with(info.features.len(), &config.hidden, info.experts.len(), &mut rng)?)
            } else {
                None
            });
        }
        Ok(MoeModel {
            config,
            experts,
            gates: GateTree {
                flat,
                modality,
                regions,
            },
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Every network in a fixed order: experts, flat gate, modality gate, region gates.
    pub fn nets(&self) -> Vec<&Mlp> {
        let mut v: Vec<&Mlp> = self.experts.iter().map(|e| &e.net).collect();
        v.extend(self.gates.flat.iter());
        v.extend(self.gates.modality.iter());
        v.extend(self.gates.regions.iter().flatten());
        v
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v: Vec<&mut Mlp> = self.experts.iter_mut().map(|e| &mut e.net).collect();
        v.extend(self.gates.flat.iter_mut());
        v.extend(self.gates.modality.iter_mut());
        v.extend(self.gates.regions.iter_mut().flatten());
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.nets_mut().into_iter().for_each(|n| n.fill(0.0));
        z
    }

    fn check_record(&self, record: &SubjectRecord) -> Result<()> {
        if record.features.len() != self.config.num_features {
            return Err(Error::dims(
                format!("features of subject {}", record.id),
                self.config.num_features,
                record.features.len(),
            ));
        }
        if record.available.len() != self.config.modalities.len() {
            return Err(Error::dims(
                format!("availability of subject {}", record.id),
                self.config.modalities.len(),
                record.available.len(),
            ));
        }
        Ok(())
    }

    /// Per-expert availability for a record.
    pub fn expert_availability(&self, record: &SubjectRecord) -> Vec<bool> {
        self.config
            .modality_of_expert()
            .into_iter()
            .map(|j| record.available[j])
            .collect()
    }

    /// `N x C` logits; rows of unavailable experts are still computed.
    pub fn expert_logits(&self, record: &SubjectRecord) -> Result<Vec<Vec<f64>>> {
        self.check_record(record)?;
        self.experts
            .iter()
            .map(|e| {
                e.net.logits(&record.features[e.features.clone()]).map_err(|err| match err {
                    Error::DimensionMismatch { expected, actual, .. } => Error::dims(
                        format!("expert {}/{}", e.modality, e.region),
                        expected,
                        actual,
                    ),
                    other => other,
                })
            })
            .collect()
    }

    fn run_gate_net(net: &Mlp, input: &[f64], keep: bool) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        if keep {
            let (z, cache) = net.forward(input)?;
            Ok((softmax(&z), Some(cache)))
        } else {
            Ok((softmax(&net.logits(input)?), None))
        }
    }

    fn gate_factors(&self, record: &SubjectRecord, keep: bool) -> Result<GateFactors> {
        let mut f = GateFactors::default();
        let needs_flags = self.gates.flat.is_some() || self.gates.modality.is_some();
        let with_flags = if needs_flags { record.features_with_flags() } else { Vec::new() };
        if let Some(net) = &self.gates.flat {
            f.flat = Some(Self::run_gate_net(net, &with_flags, keep)?);
        }
        if let Some(net) = &self.gates.modality {
            f.modality = Some(Self::run_gate_net(net, &with_flags, keep)?);
        }
        for (info, net) in self.config.modalities.iter().zip(&self.gates.regions) {
            f.regions.push(match net {
                Some(net) => Some(Self::run_gate_net(net, &record.features[info.features.clone()], keep)?),
                None => None,
            });
        }
        Ok(f)
    }

    fn combine(&self, f: &GateFactors) -> Result<Vec<f64>> {
        let n = self.num_experts();
        let m = self.config.modalities.len() as f64;
        let mode = self.config.gate_mode;
        if mode == GateMode::Flat {
            return f
                .flat
                .as_ref()
                .map(|(p, _)| p.clone())
                .ok_or_else(|| Error::InvalidConfig("flat gate missing".into()));
        }
        let mut g = vec![0.0; n];
        for (j, info) in self.config.modalities.iter().enumerate() {
            let r = info.experts.len();
            let p_mod = match mode {
                GateMode::RegionOnly => 1.0 / m,
                _ => f
                    .modality
                    .as_ref()
                    .map(|(p, _)| p[j])
                    .ok_or_else(|| Error::InvalidConfig("modality gate missing".into()))?,
            };
            for (k, e) in info.experts.clone().enumerate() {
                let p_reg = match (mode, &f.regions[j]) {
                    (GateMode::ModalityOnly, _) => 1.0 / r as f64,
                    (_, Some((p, _))) => p[k],
                    (_, None) if r == 1 => 1.0,
                    _ => return Err(Error::InvalidConfig(format!("region gate missing for {}", info.name))),
                };
                g[e] = p_mod * p_reg;
            }
        }
        Ok(g)
    }

    fn gate_output(&self, f: &GateFactors) -> Result<GateOutput> {
        let mut g = GateOutput::from_weights(self.combine(f)?, self.config.groups());
        g.active_mask = vec![true; g.weights.len()];
        Ok(g)
    }

    /// Flat gate weights before masking.
    pub fn gate_flat(&self, record: &SubjectRecord) -> Result<GateOutput> {
        if self.config.gate_mode != GateMode::Flat {
            return Err(Error::InvalidConfig("gate_flat requires the flat gate mode".into()));
        }
        self.check_record(record)?;
        self.gate_output(&self.gate_factors(record, false)?)
    }

    /// Hierarchical (or single-level ablation) gate weights before masking.
    pub fn gate_hierarchical(&self, record: &SubjectRecord) -> Result<GateOutput> {
        if self.config.gate_mode == GateMode::Flat {
            return Err(Error::InvalidConfig("gate_hierarchical requires a hierarchical gate mode".into()));
        }
        self.check_record(record)?;
        self.gate_output(&self.gate_factors(record, false)?)
    }

    /// Gate weights before masking for whichever mode is configured.
    pub fn gate(&self, record: &SubjectRecord) -> Result<GateOutput> {
        self.check_record(record)?;
        self.gate_output(&self.gate_factors(record, false)?)
    }

    /// Final gate: raw weights, masked, then top-k.
    pub fn final_gate(&self, raw: &GateOutput, record: &SubjectRecord) -> Result<GateOutput> {
        let masked = mask_renormalize(raw, &self.expert_availability(record))?;
        match self.config.top_k {
            Some(k) => topk_sparsify(&masked, k),
            None => Ok(masked),
        }
    }

    pub fn fuse_predict(&self, record: &SubjectRecord) -> Result<Prediction> {
        Ok(self.run(record, false)?.prediction)
    }

    pub fn forward(&self, record: &SubjectRecord) -> Result<MoeTrace> {
        self.run(record, true)
    }

    fn run(&self, record: &SubjectRecord, keep: bool) -> Result<MoeTrace> {
        self.check_record(record)?;
        let mut expert_logits = Vec::with_capacity(self.num_experts());
        let mut expert_caches = Vec::new();
        for e in &self.experts {
            let x = &record.features[e.features.clone()];
            if keep {
                let (h, cache) = e.net.forward(x)?;
                expert_logits.push(h);
                expert_caches.push(cache);
            } else {
                expert_logits.push(e.net.logits(x)?);
            }
        }
        let factors = self.gate_factors(record, keep)?;
        let raw = self.gate_output(&factors)?;
        let gate = self.final_gate(&raw, record)?;
        let c = self.config.num_classes;
        let mut fused = vec![0.0; c];
        for (w, h) in gate.weights.iter().zip(&expert_logits) {
            if *w != 0.0 {
                for (f, v) in fused.iter_mut().zip(h) {
                    *f += w * v;
                }
            }
        }
        let class_probs = softmax(&fused);
        Ok(MoeTrace {
            selection: gate.active_mask.clone(),
            raw: raw.weights,
            available: self.expert_availability(record),
            factors,
            expert_caches,
            prediction: Prediction {
                class_probs,
                fused_logits: fused,
                gate,
                expert_logits,
            },
        })
    }

    /// Reverse pass through fusion, top-k and masking (fixed selection), the
    /// gate softmaxes and products, and every expert.
    ///
    /// `grad_fused` is dL/d(fused logits); `grad_weights` and `grad_logits`
    /// are optional extra upstream gradients on the final gate weights and on
    /// the expert logits. Gradients accumulate into `grads`.
    pub fn backward(
        &self,
        trace: &MoeTrace,
        grad_fused: &[f64],
        grad_weights: Option<&[f64]>,
        grad_logits: Option<&[Vec<f64>]>,
        grads: &mut MoeModel,
    ) -> Result<()> {
        let n = self.num_experts();
        let c = self.config.num_classes;
        if grad_fused.len() != c {
            return Err(Error::dims("fused logit gradient", c, grad_fused.len()));
        }
        if trace.expert_caches.len() != n {
            return Err(Error::InvalidConfig("trace was produced without caches".into()));
        }
        let pred = &trace.prediction;
        let w = &pred.gate.weights;

        // Fusion.
        let mut dw: Vec<f64> = pred
            .expert_logits
            .iter()
            .map(|h| h.iter().zip(grad_fused).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(extra) = grad_weights {
            for (d, e) in dw.iter_mut().zip(extra) {
                *d += e;
            }
        }
        for (m, e) in self.experts.iter().enumerate() {
            let mut dh: Vec<f64> = grad_fused.iter().map(|g| w[m] * g).collect();
            if let Some(extra) = grad_logits {
                for (d, e) in dh.iter_mut().zip(&extra[m]) {
                    *d += e;
                }
            }
            if dh.iter().any(|v| *v != 0.0) {
                e.net.backward_into(&trace.expert_caches[m], &dh, &mut grads.experts[m].net)?;
            }
        }

        // Masking and top-k: w = s * g / sum(s * g) with the selection s held fixed.
        let total: f64 = trace
            .raw
            .iter()
            .zip(&trace.selection)
            .filter(|(_, s)| **s)
            .map(|(g, _)| g)
            .sum();
        let inner: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let dg: Vec<f64> = (0..n)
            .map(|m| if trace.selection[m] { (dw[m] - inner) / total } else { 0.0 })
            .collect();

        // Gate factors.
        let mode = self.config.gate_mode;
        let f = &trace.factors;
        if mode == GateMode::Flat {
            let (p, cache) = f.flat.as_ref().ok_or_else(|| Error::InvalidConfig("flat gate missing".into()))?;
            let dz = softmax_backward(p, &dg);
            let net = self.gates.flat.as_ref().expect("flat gate present");
            let cache = cache.as_ref().ok_or_else(|| Error::InvalidConfig("gate cache missing".into()))?;
            net.backward_into(cache, &dz, grads.gates.flat.as_mut().expect("flat gate grads"))?;
            return Ok(());
        }
        let m_count = self.config.modalities.len() as f64;
        let mut d_mod = vec![0.0; self.config.modalities.len()];
        for (j, info) in self.config.modalities.iter().enumerate() {
            let p_mod = match (&f.modality, mode) {
                (_, GateMode::RegionOnly) => 1.0 / m_count,
                (Some((p, _)), _) => p[j],
                (None, _) => return Err(Error::InvalidConfig("modality gate missing".into())),
            };
            let r = info.experts.len();
            let mut d_reg = vec![0.0; r];
            for (k, e) in info.experts.clone().enumerate() {
                let p_reg = match (mode, &f.regions[j]) {
                    (GateMode::ModalityOnly, _) => 1.0 / r as f64,
                    (_, Some((p, _))) => p[k],
                    _ => 1.0,
                };
                d_mod[j] += dg[e] * p_reg;
                d_reg[k] = dg[e] * p_mod;
            }
            if mode != GateMode::ModalityOnly {
                if let (Some((p, Some(cache))), Some(net)) = (&f.regions[j], &self.gates.regions[j]) {
                    let dz = softmax_backward(p, &d_reg);
                    let gnet = grads.gates.regions[j].as_mut().expect("region gate grads");
                    net.backward_into(cache, &dz, gnet)?;
                }
            }
        }
        if mode != GateMode::RegionOnly {
            let (p, cache) = f
                .modality
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("modality gate missing".into()))?;
            let cache = cache.as_ref().ok_or_else(|| Error::InvalidConfig("gate cache missing".into()))?;
            let dz = softmax_backward(p, &d_mod);
            let net = self.gates.modality.as_ref().expect("modality gate present");
            net.backward_into(cache, &dz, grads.gates.modality.as_mut().expect("modality gate grads"))?;
        }
        Ok(())
    }

    /// Per-sample objective; when `grads` is given, `scale` times the
    /// gradient is accumulated into it.
    pub fn sample_loss(
        &self,
        record: &SubjectRecord,
        loss: &LossConfig,
        grads: Option<(&mut MoeModel, f64)>,
    ) -> Result<LossBreakdown> {
        let trace = self.run(record, grads.is_some())?;
        let pred = &trace.prediction;
        let y = record.label;
        let ce = objectives::weighted_ce(&pred.class_probs, y, &loss.class_weights);
        let entropy = objectives::gate_entropy(&pred.gate.weights);
        let (diversity, div_grad) = if loss.lambda_diversity > 0.0 && grads.is_some() {
            objectives::diversity_penalty_grad(&pred.expert_logits, &trace.available)
        } else {
            (objectives::diversity_penalty(&pred.expert_logits, &trace.available), Vec::new())
        };
        let parts = LossBreakdown::compose(ce, entropy, diversity, loss);
        if let Some((g, scale)) = grads {
            let dfused: Vec<f64> = objectives::weighted_ce_logit_grad(&pred.class_probs, y, &loss.class_weights)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            let dw: Option<Vec<f64>> = (loss.lambda_sparsity > 0.0).then(|| {
                objectives::gate_entropy_grad(&pred.gate.weights)
                    .into_iter()
                    .map(|v| v * scale * loss.lambda_sparsity)
                    .collect()
            });
            let dh: Option<Vec<Vec<f64>>> = (loss.lambda_diversity > 0.0).then(|| {
                div_grad
                    .iter()
                    .map(|row| row.iter().map(|v| v * scale * loss.lambda_diversity).collect())
                    .collect()
            });
            self.backward(&trace, &dfused, dw.as_deref(), dh.as_deref(), g)?;
        }
        Ok(parts)
    }
}

/// Public alias kept for symmetry with the other softmax helpers.
pub fn class_probs(fused_logits: &[f64]) -> Result<Vec<f64>> {
    nn::stable_softmax(fused_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSchema;
    use rand::Rng;

    fn layout(spec: &[(&str, &[usize])]) -> Layout {
        let mut col = 0;
        let modalities: Vec<String> = spec
            .iter()
            .map(|(name, regions)| {
                let regions: Vec<String> = regions
                    .iter()
                    .enumerate()
                    .map(|(r, d)| {
                        let cols: Vec<String> = (0..*d)
                            .map(|_| {
                                col += 1;
                                format!("\"c{col}\"")
                            })
                            .collect();
                        format!("{{\"name\":\"r{r}\",\"columns\":[{}]}}", cols.join(","))
                    })
                    .collect();
                format!("{{\"name\":\"{name}\",\"regions\":[{}]}}", regions.join(","))
            })
            .collect();
        let json = format!("{{\"modalities\":[{}]}}", modalities.join(","));
        FeatureSchema::from_json(&json).unwrap().layout().unwrap()
    }

    fn record(layout: &Layout, available: Vec<bool>, seed: u64) -> SubjectRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features: Vec<f64> = (0..layout.num_features()).map(|_| rng.random_range(-1.5..1.5)).collect();
        for (j, m) in layout.modalities.iter().enumerate() {
            if !available[j] {
                features[m.features.clone()].fill(0.0);
            }
        }
        SubjectRecord {
            id: format!("s{seed}"),
            features,
            available,
            label: (seed % 3) as usize,
        }
    }

    fn model(layout: &Layout, mode: GateMode, top_k: Option<usize>, seed: u64) -> MoeModel {
        let cfg = MoeConfig::from_layout(layout, 3, mode, top_k, &[4, 3]).unwrap();
        let mut m = MoeModel::init(layout, cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        for net in m.nets_mut() {
            for layer in net.layers_mut() {
                layer.bias_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
            }
        }
        m
    }

    fn groups(sizes: &[usize]) -> Vec<Range<usize>> {
        let mut start = 0;
        sizes
            .iter()
            .map(|s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect()
    }

    #[test]
    fn zero_experts_give_zero_logits() {
        let l = layout(&[("A", &[2, 1]), ("B", &[3])]);
        let mut m = model(&l, GateMode::Hierarchical, None, 1);
        m.experts.iter_mut().for_each(|e| e.net.fill(0.0));
        let h = m.expert_logits(&record(&l, vec![true, true], 2)).unwrap();
        assert_eq!(h, vec![vec![0.0; 3]; 3]);
    }

    #[test]
    fn expert_rows_match_independent_forward() {
        let l = layout(&[("A", &[2, 1]), ("B", &[3, 2])]);
        let m = model(&l, GateMode::Flat, None, 3);
        let r = record(&l, vec![true, true], 4);
        let h = m.expert_logits(&r).unwrap();
        assert_eq!(h.len(), 4);
        for (row, e) in h.iter().zip(&m.experts) {
            let (want, _) = e.net.forward(&r.features[e.features.clone()]).unwrap();
            assert_eq!(row, &want);
        }
        let single = layout(&[("A", &[2])]);
        let m1 = model(&single, GateMode::Hierarchical, None, 5);
        let r1 = record(&single, vec![true], 6);
        assert_eq!(m1.expert_logits(&r1).unwrap(), vec![m1.experts[0].net.logits(&r1.features).unwrap()]);
    }

    #[test]
    fn dimension_errors_name_the_subject() {
        let l = layout(&[("A", &[2])]);
        let m = model(&l, GateMode::Flat, None, 1);
        let mut r = record(&l, vec![true], 1);
        r.features.pop();
        assert!(m.fuse_predict(&r).unwrap_err().to_string().contains("s1"));
    }

    #[test]
    fn flat_gate_examples() {
        let l = layout(&[("A", &[1, 1, 1])]);
        let mut m = model(&l, GateMode::Flat, None, 9);
        m.gates.flat.as_mut().unwrap().fill(0.0);
        let g = m.gate_flat(&record(&l, vec![true], 1)).unwrap();
        assert!(g.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));

        // Output bias (ln 3, 0) with zero weights gives (0.75, 0.25).
        let l2 = layout(&[("A", &[1, 1])]);
        let mut m2 = model(&l2, GateMode::Flat, None, 9);
        let gate = m2.gates.flat.as_mut().unwrap();
        gate.fill(0.0);
        gate.layers_mut()[2].bias_mut().copy_from_slice(&[3f64.ln(), 0.0]);
        let g = m2.gate_flat(&record(&l2, vec![true], 1)).unwrap();
        assert!((g.weights[0] - 0.75).abs() < 1e-15 && (g.weights[1] - 0.25).abs() < 1e-15);

        let m3 = model(&l, GateMode::Flat, None, 10);
        let r = record(&l, vec![true], 3);
        let want = nn::stable_softmax(&m3.gates.flat.as_ref().unwrap().logits(&r.features_with_flags()).unwrap()).unwrap();
        assert_eq!(m3.gate_flat(&r).unwrap().weights, want);
        assert!(m3.gate_hierarchical(&r).is_err());
    }

    #[test]
    fn hierarchical_product_rule() {
        // Modality weights (0.6, 0.4); modality A has regions (0.5, 0.5); B is a singleton.
        let l = layout(&[("A", &[1, 1]), ("B", &[1])]);
        let mut m = model(&l, GateMode::Hierarchical, None, 2);
        m.nets_mut().into_iter().skip(3).for_each(|n| n.fill(0.0));
        m.gates.modality.as_mut().unwrap().layers_mut()[2]
            .bias_mut()
            .copy_from_slice(&[(0.6f64 / 0.4).ln(), 0.0]);
        let g = m.gate_hierarchical(&record(&l, vec![true, true], 1)).unwrap();
        let want = [0.3, 0.3, 0.4];
        for (a, b) in g.weights.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{:?}", g.weights);
        }
        assert!(m.gates.regions[1].is_none());

        let l2 = layout(&[("A", &[1, 1]), ("B", &[1, 1])]);
        let mut m2 = model(&l2, GateMode::Hierarchical, None, 2);
        m2.nets_mut().into_iter().skip(4).for_each(|n| n.fill(0.0));
        let g = m2.gate_hierarchical(&record(&l2, vec![true, true], 1)).unwrap();
        assert_eq!(g.weights, vec![0.25; 4]);
    }

    #[test]
    fn hierarchical_matches_factored_softmax() {
        let l = layout(&[("A", &[2, 1, 1]), ("B", &[1, 2]), ("C", &[2])]);
        for seed in 0..20 {
            let m = model(&l, GateMode::Hierarchical, None, seed);
            let r = record(&l, vec![true, true, true], seed + 50);
            let g = m.gate_hierarchical(&r).unwrap();
            assert!((g.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let pm = nn::stable_softmax(&m.gates.modality.as_ref().unwrap().logits(&r.features_with_flags()).unwrap()).unwrap();
            for (j, info) in m.config.modalities.iter().enumerate() {
                let pr = match &m.gates.regions[j] {
                    Some(net) => nn::stable_softmax(&net.logits(&r.features[info.features.clone()]).unwrap()).unwrap(),
                    None => vec![1.0],
                };
                for (k, e) in info.experts.clone().enumerate() {
                    assert!((g.weights[e] - pm[j] * pr[k]).abs() <= 1e-15);
                }
                assert!((g.modality_weights[j] - pm[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_level_ablations_spread_uniformly() {
        let l = layout(&[("A", &[1, 1]), ("B", &[1, 1, 1])]);
        let r = record(&l, vec![true, true], 3);
        let m = model(&l, GateMode::ModalityOnly, None, 4);
        let g = m.gate(&r).unwrap();
        let pm = nn::stable_softmax(&m.gates.modality.as_ref().unwrap().logits(&r.features_with_flags()).unwrap()).unwrap();
        assert!((g.weights[0] - pm[0] / 2.0).abs() < 1e-15);
        assert!((g.weights[4] - pm[1] / 3.0).abs() < 1e-15);
        assert!(m.gates.regions.iter().all(Option::is_none));

        let m = model(&l, GateMode::RegionOnly, None, 4);
        let g = m.gate(&r).unwrap();
        assert!(m.gates.modality.is_none());
        assert!((g.modality_weights[0] - 0.5).abs() < 1e-15);
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_examples() {
        let g = GateOutput::from_weights(vec![0.2, 0.3, 0.5], groups(&[2, 1]));
        let out = mask_renormalize(&g, &[true, false, true]).unwrap();
        assert_eq!(out.weights, vec![0.2 / 0.7, 0.0, 0.5 / 0.7]);
        assert_eq!(out.active_mask, vec![true, false, true]);
        assert!((out.modality_weights[0] - 0.2 / 0.7).abs() < 1e-15);
        assert_eq!(out.region_weights[0], vec![1.0, 0.0]);
        let same = mask_renormalize(&g, &[true, true, true]).unwrap();
        assert_eq!(same, g);
        assert!(matches!(mask_renormalize(&g, &[false; 3]), Err(Error::NoAvailableExperts)));
    }

    #[test]
    fn topk_examples() {
        let g = GateOutput::from_weights(vec![0.5, 0.3, 0.2], groups(&[3]));
        assert_eq!(topk_sparsify(&g, 3).unwrap(), g);
        assert_eq!(topk_sparsify(&g, 1).unwrap().weights, vec![1.0, 0.0, 0.0]);
        let tie = GateOutput::from_weights(vec![0.4, 0.4, 0.2], groups(&[3]));
        assert_eq!(topk_sparsify(&tie, 1).unwrap().weights, vec![1.0, 0.0, 0.0]);
        assert!(topk_sparsify(&g, 0).is_err());
        assert_eq!(topk_sparsify(&g, 10).unwrap(), g);
    }

    #[test]
    fn topk_ties_pick_lowest_index_under_every_permutation() {
        // Every placement of two tied maxima among four slots.
        for a in 0..4 {
            for b in a + 1..4 {
                let mut w = vec![0.1; 4];
                w[a] = 0.35;
                w[b] = 0.35;
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                let out = topk_sparsify(&GateOutput::from_weights(w, groups(&[4])), 1).unwrap();
                let kept: Vec<usize> = (0..4).filter(|&i| out.weights[i] > 0.0).collect();
                assert_eq!(kept, vec![a]);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let l = layout(&[("A", &[1, 1])]);
        let mut m = model(&l, GateMode::Flat, None, 1);
        let r = record(&l, vec![true], 1);
        // One-hot gate at expert 1.
        let gate = m.gates.flat.as_mut().unwrap();
        gate.fill(0.0);
        gate.layers_mut()[2].bias_mut().copy_from_slice(&[-800.0, 0.0]);
        let p = m.fuse_predict(&r).unwrap();
        let h1 = m.experts[1].net.logits(&r.features[1..2]).unwrap();
        assert_eq!(p.class_probs, nn::stable_softmax(&h1).unwrap());

        // Uniform gate over h1 = (2,0,0), h2 = (0,2,0).
        let gate = m.gates.flat.as_mut().unwrap();
        gate.layers_mut()[2].bias_mut().copy_from_slice(&[0.0, 0.0]);
        for (e, h) in m.experts.iter_mut().zip([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]) {
            e.net.fill(0.0);
            e.net.layers_mut()[2].bias_mut().copy_from_slice(&h);
        }
        let p = m.fuse_predict(&r).unwrap();
        assert_eq!(p.fused_logits, vec![1.0, 1.0, 0.0]);

        // Identical experts: any gate gives softmax(h).
        for e in &mut m.experts {
            e.net.layers_mut()[2].bias_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        }
        let p = m.fuse_predict(&r).unwrap();
        let want = nn::stable_softmax(&[0.5, -1.0, 2.0]).unwrap();
        for (a, b) in p.class_probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_logits_are_the_weighted_sum() {
        let l = layout(&[("A", &[1, 2]), ("B", &[2])]);
        for (mode, k) in [(GateMode::Hierarchical, None), (GateMode::Flat, Some(2))] {
            let m = model(&l, mode, k, 8);
            let r = record(&l, vec![true, false], 9);
            let p = m.fuse_predict(&r).unwrap();
            for c in 0..3 {
                let s: f64 = (0..3).map(|e| p.gate.weights[e] * p.expert_logits[e][c]).sum();
                assert!((s - p.fused_logits[c]).abs() <= 1e-12);
            }
            assert_eq!(p.gate.weights[2], 0.0);
            assert_eq!(p.class_probs, nn::stable_softmax(&p.fused_logits).unwrap());
        }
    }

    fn batch_loss(m: &MoeModel, recs: &[SubjectRecord], cfg: &LossConfig) -> f64 {
        recs.iter().map(|r| m.sample_loss(r, cfg, None).unwrap().total).sum::<f64>() / recs.len() as f64
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let l = layout(&[("A", &[1, 2]), ("B", &[2])]);
        let m = model(&l, GateMode::Hierarchical, None, 2);
        let trace = m.forward(&record(&l, vec![true, true], 1)).unwrap();
        let mut g = m.zeros_like();
        m.backward(&trace, &[0.0; 3], None, None, &mut g).unwrap();
        assert!(g.nets().iter().all(|n| n.params().all(|v| v == 0.0)));
    }

    #[test]
    fn masked_expert_gets_no_fusion_gradient() {
        let l = layout(&[("A", &[1, 2]), ("B", &[2])]);
        let m = model(&l, GateMode::Hierarchical, None, 2);
        let trace = m.forward(&record(&l, vec![true, false], 1)).unwrap();
        let mut g = m.zeros_like();
        m.backward(&trace, &[0.3, -0.1, 0.2], None, None, &mut g).unwrap();
        assert!(g.experts[2].net.params().all(|v| v == 0.0));
        assert!(g.experts[0].net.params().any(|v| v != 0.0));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let l = layout(&[("A", &[2, 1]), ("B", &[3])]);
        let cfg = LossConfig::new(vec![0.8, 1.0, 1.3], 0.05, 0.05).unwrap();
        let h = 1e-6;
        for mode in [GateMode::Flat, GateMode::Hierarchical, GateMode::ModalityOnly, GateMode::RegionOnly] {
            let m = model(&l, mode, None, 11);
            let recs = vec![
                record(&l, vec![true, true], 1),
                record(&l, vec![true, false], 2),
                record(&l, vec![false, true], 3),
            ];
            let mut g = m.zeros_like();
            for r in &recs {
                m.sample_loss(r, &cfg, Some((&mut g, 1.0 / 3.0))).unwrap();
            }
            let analytic: Vec<Vec<f64>> = g.nets().iter().map(|n| n.params().collect()).collect();
            for (ni, a) in analytic.iter().enumerate() {
                for (pi, av) in a.iter().enumerate() {
                    let mut plus = m.clone();
                    *plus.nets_mut()[ni].param_mut(pi).unwrap() += h;
                    let mut minus = m.clone();
                    *minus.nets_mut()[ni].param_mut(pi).unwrap() -= h;
                    let num = (batch_loss(&plus, &recs, &cfg) - batch_loss(&minus, &recs, &cfg)) / (2.0 * h);
                    assert!(
                        (av - num).abs() <= (1e-4 * av.abs().max(num.abs())).max(1e-7),
                        "{mode:?} net {ni} param {pi}: {av} vs {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn model_json_roundtrip() {
        let l = layout(&[("A", &[2, 1]), ("B", &[3])]);
        let m = model(&l, GateMode::Hierarchical, Some(2), 4);
        let text = serde_json::to_string(&m).unwrap();
        let back: MoeModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
