//! Training objective: class-weighted cross-entropy plus gate-entropy and
//! expert-diversity penalties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to the true-class probability inside the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Rows with a centered norm below this contribute cosine 0.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    #[default]
    Balanced,
    None,
}

impl std::str::FromStr for ClassWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(ClassWeighting::Balanced),
            "none" => Ok(ClassWeighting::None),
            other => Err(Error::InvalidConfig(format!("unknown class weighting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub class_weights: Vec<f64>,
    pub lambda_sparsity: f64,
    pub lambda_diversity: f64,
}

impl LossConfig {
    pub fn new(class_weights: Vec<f64>, lambda_sparsity: f64, lambda_diversity: f64) -> Result<Self> {
        if class_weights.is_empty() || !class_weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::InvalidConfig("class weights must be positive and finite".into()));
        }
        if !(lambda_sparsity >= 0.0 && lambda_diversity >= 0.0) {
            return Err(Error::InvalidConfig("penalty coefficients must be non-negative".into()));
        }
        Ok(LossConfig {
            class_weights,
            lambda_sparsity,
            lambda_diversity,
        })
    }

    /// Unit class weights and the default penalty coefficients (0.01 each).
    pub fn unweighted(num_classes: usize) -> Self {
        LossConfig {
            class_weights: vec![1.0; num_classes],
            lambda_sparsity: 0.01,
            lambda_diversity: 0.01,
        }
    }
}

/// Per-sample or batch-mean loss terms. `total` includes the lambda factors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub sparsity: f64,
    pub diversity: f64,
}

impl LossBreakdown {
    pub fn compose(ce: f64, sparsity: f64, diversity: f64, cfg: &LossConfig) -> Self {
        LossBreakdown {
            total: ce + cfg.lambda_sparsity * sparsity + cfg.lambda_diversity * diversity,
            ce,
            sparsity,
            diversity,
        }
    }

    /// Mean of per-sample breakdowns, recomposed so additivity holds.
    pub fn mean(parts: &[LossBreakdown], cfg: &LossConfig) -> Self {
        let n = parts.len().max(1) as f64;
        let ce = parts.iter().map(|p| p.ce).sum::<f64>() / n;
        let sp = parts.iter().map(|p| p.sparsity).sum::<f64>() / n;
        let dv = parts.iter().map(|p| p.diversity).sum::<f64>() / n;
        LossBreakdown::compose(ce, sp, dv, cfg)
    }
}

/// Inverse-frequency weights `N / (C * n_c)`, averaging to one on the training labels.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("class counts"));
    }
    if let Some(c) = counts.iter().position(|n| *n == 0) {
        return Err(Error::Data(format!(
            "class {c} has no training samples; use stratified folds or fewer folds"
        )));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|n| total as f64 / (k * *n as f64)).collect())
}

/// `-w_y ln(max(p_y, 1e-12))`.
pub fn weighted_ce(probs: &[f64], y: usize, weights: &[f64]) -> f64 {
    -weights[y] * probs[y].max(PROB_CLAMP).ln()
}

/// Gradient of [`weighted_ce`] with respect to the logits that produced `probs`.
pub fn weighted_ce_logit_grad(probs: &[f64], y: usize, weights: &[f64]) -> Vec<f64> {
    if probs[y] <= PROB_CLAMP {
        return vec![0.0; probs.len()];
    }
    probs
        .iter()
        .enumerate()
        .map(|(c, p)| weights[y] * (p - if c == y { 1.0 } else { 0.0 }))
        .collect()
}

/// Shannon entropy over strictly positive weights.
pub fn gate_entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>()
}

pub fn gate_entropy_grad(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .map(|w| if *w > 0.0 { -(w.ln() + 1.0) } else { 0.0 })
        .collect()
}

fn centered(row: &[f64]) -> (Vec<f64>, f64) {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    let u: Vec<f64> = row.iter().map(|v| v - mean).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    (u, norm)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean squared cosine between mean-centered logit rows over active pairs.
pub fn diversity_penalty(logits: &[Vec<f64>], active: &[bool]) -> f64 {
    diversity_with_grad(logits, active, false).0
}

/// Penalty value and its gradient with respect to every logit row.
pub fn diversity_penalty_grad(logits: &[Vec<f64>], active: &[bool]) -> (f64, Vec<Vec<f64>>) {
    diversity_with_grad(logits, active, true)
}

fn diversity_with_grad(logits: &[Vec<f64>], active: &[bool], want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let idx: Vec<usize> = (0..logits.len()).filter(|&i| active[i]).collect();
    let mut grad = if want_grad {
        logits.iter().map(|r| vec![0.0; r.len()]).collect()
    } else {
        Vec::new()
    };
    if idx.len() < 2 {
        return (0.0, grad);
    }
    let pairs = (idx.len() * (idx.len() - 1) / 2) as f64;
    let rows: Vec<(Vec<f64>, f64)> = idx.iter().map(|&i| centered(&logits[i])).collect();
    let mut du: Vec<Vec<f64>> = rows.iter().map(|(u, _)| vec![0.0; u.len()]).collect();
    let mut total = 0.0;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let (ua, na) = &rows[a];
            let (ub, nb) = &rows[b];
            if *na < NORM_FLOOR || *nb < NORM_FLOOR {
                continue;
            }
            let c = dot(ua, ub) / (na * nb);
            total += c * c;
            if want_grad {
                let s = 2.0 * c / pairs;
                for t in 0..ua.len() {
                    du[a][t] += s * (ub[t] / (na * nb) - c * ua[t] / (na * na));
                    du[b][t] += s * (ua[t] / (na * nb) - c * ub[t] / (nb * nb));
                }
            }
        }
    }
    if want_grad {
        for (k, &i) in idx.iter().enumerate() {
            let mean = du[k].iter().sum::<f64>() / du[k].len() as f64;
            for (g, d) in grad[i].iter_mut().zip(&du[k]) {
                *g = d - mean;
            }
        }
    }
    (total / pairs, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights_from_counts(&[10, 10, 10]).unwrap(), vec![1.0, 1.0, 1.0]);
        let w = class_weights_from_counts(&[637, 557, 336]).unwrap();
        // 1530 / (3 * n_c)
        let want = [0.800_627_943_485_086_3, 0.915_619_389_587_073_6, 1.517_857_142_857_142_9];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let w = class_weights_from_counts(&[1, 99]).unwrap();
        assert_eq!(w[0], 50.0);
        assert!((w[1] - 100.0 / 198.0).abs() < 1e-15);
        let err = class_weights_from_counts(&[3, 0]).unwrap_err();
        assert!(err.to_string().contains("stratified"));
    }

    #[test]
    fn ce_examples() {
        assert_eq!(weighted_ce(&[0.0, 1.0, 0.0], 1, &[1.0, 1.0, 1.0]), 0.0);
        let u = weighted_ce(&[1.0 / 3.0; 3], 2, &[1.0; 3]);
        assert!((u - 3f64.ln()).abs() < 1e-15);
        let v = weighted_ce(&[0.7, 0.2, 0.1], 1, &[1.0, 2.0, 1.0]);
        assert!((v - 3.218_875_824_868_200_7).abs() < 1e-12);
        let clamped = weighted_ce(&[1.0, 0.0], 1, &[1.0, 1.0]);
        assert!((clamped - 12.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(gate_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((gate_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert!((gate_entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
    }

    fn naive_diversity(h: &[Vec<f64>], active: &[bool]) -> f64 {
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for i in 0..h.len() {
            for j in 0..h.len() {
                if i < j && active[i] && active[j] {
                    pairs += 1.0;
                    let mi = h[i].iter().sum::<f64>() / h[i].len() as f64;
                    let mj = h[j].iter().sum::<f64>() / h[j].len() as f64;
                    let (mut d, mut ni, mut nj) = (0.0, 0.0, 0.0);
                    for t in 0..h[i].len() {
                        d += (h[i][t] - mi) * (h[j][t] - mj);
                        ni += (h[i][t] - mi).powi(2);
                        nj += (h[j][t] - mj).powi(2);
                    }
                    if ni.sqrt() >= NORM_FLOOR && nj.sqrt() >= NORM_FLOOR {
                        sum += d * d / (ni * nj);
                    }
                }
            }
        }
        if pairs == 0.0 {
            0.0
        } else {
            sum / pairs
        }
    }

    #[test]
    fn diversity_examples() {
        let same = vec![vec![1.0, 2.0, 4.0], vec![1.0, 2.0, 4.0]];
        assert!((diversity_penalty(&same, &[true, true]) - 1.0).abs() < 1e-15);
        let orth = vec![vec![1.0, -1.0, 0.0], vec![1.0, 1.0, -2.0]];
        assert!(diversity_penalty(&orth, &[true, true]).abs() < 1e-15);
        assert_eq!(diversity_penalty(&same, &[true, false]), 0.0);
        let flat = vec![vec![3.0, 3.0, 3.0], vec![1.0, 2.0, 4.0]];
        assert_eq!(diversity_penalty(&flat, &[true, true]), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let active = [true, rng.random_bool(0.7), true];
            let a = diversity_penalty(&h, &active);
            assert!((a - naive_diversity(&h, &active)).abs() <= 1e-12);
        }
    }

    #[test]
    fn diversity_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let step = 1e-6;
        for _ in 0..30 {
            let h: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let active = [true, true, rng.random_bool(0.5), true];
            let (_, g) = diversity_penalty_grad(&h, &active);
            for i in 0..h.len() {
                for t in 0..h[i].len() {
                    let mut p = h.clone();
                    p[i][t] += step;
                    let mut m = h.clone();
                    m[i][t] -= step;
                    let n = (diversity_penalty(&p, &active) - diversity_penalty(&m, &active)) / (2.0 * step);
                    assert!((g[i][t] - n).abs() <= (1e-4 * n.abs()).max(1e-7), "{} vs {n}", g[i][t]);
                }
            }
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 0.8];
        let w = [0.5, 2.0, 1.5];
        let p = crate::nn::stable_softmax(&logits).unwrap();
        let g = weighted_ce_logit_grad(&p, 1, &w);
        for c in 0..3 {
            let f = |d: f64| {
                let mut l = logits;
                l[c] += d;
                weighted_ce(&crate::nn::stable_softmax(&l).unwrap(), 1, &w)
            };
            let n = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((g[c] - n).abs() < 1e-7);
        }
    }

    #[test]
    fn breakdown_is_additive() {
        let cfg = LossConfig::new(vec![1.0, 2.0], 0.3, 0.07).unwrap();
        let parts = [
            LossBreakdown::compose(1.0, 0.5, 0.2, &cfg),
            LossBreakdown::compose(0.4, 0.1, 0.9, &cfg),
        ];
        let m = LossBreakdown::mean(&parts, &cfg);
        assert!((m.total - (m.ce + 0.3 * m.sparsity + 0.07 * m.diversity)).abs() < 1e-12);
        assert!(LossConfig::new(vec![0.0], 0.0, 0.0).is_err());
        assert!(LossConfig::new(vec![1.0], -1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn penalty_bounds(
            raw in proptest::collection::vec(0.0f64..1.0, 1..10),
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..6),
        ) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-6);
            let g: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let active = g.iter().filter(|v| **v > 0.0).count();
            let h = gate_entropy(&g);
            prop_assert!(h >= -1e-15 && h <= (active as f64).ln() + 1e-12);
            let mask = vec![true; rows.len()];
            let d = diversity_penalty(&rows, &mask);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        }

        #[test]
        fn ce_nonnegative(raw in proptest::collection::vec(0.01f64..1.0, 2..6), y in 0usize..2) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            prop_assert!(weighted_ce(&p, y, &vec![1.0; p.len()]) >= 0.0);
        }
    }
}
