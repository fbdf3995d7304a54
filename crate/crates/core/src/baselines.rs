//! Fusion baselines: a concatenation MLP, a late-fusion ensemble of
//! per-modality MLPs, and multinomial logistic regression.
//!
//! Concatenation and logistic regression read the zero-imputed feature vector
//! with one availability flag per modality appended. Late-fusion sub-networks
//! see only their own modality and are left out of the average when it is
//! missing.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Layout, SubjectRecord};
use crate::error::{Error, Result};
use crate::nn::{self, init_params_with, Mlp};
use crate::objectives::{self, LossBreakdown, LossConfig};
use crate::train::Trainable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatMlp {
    pub net: Mlp,
}

impl ConcatMlp {
    pub fn init(layout: &Layout, num_classes: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = layout.num_features() + layout.num_modalities();
        Ok(ConcatMlp {
            net: init_params_with(in_dim, hidden, num_classes, &mut rng)?,
        })
    }
}

/// Concatenated-input linear softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogReg {
    pub net: Mlp,
}

impl LogReg {
    /// Zero-initialized, so the untrained model predicts uniform probabilities.
    pub fn init(layout: &Layout, num_classes: usize) -> Result<Self> {
        let in_dim = layout.num_features() + layout.num_modalities();
        Ok(LogReg {
            net: Mlp::zeros(in_dim, &[], num_classes)?,
        })
    }
}

fn single_net_loss(
    net: &Mlp,
    record: &SubjectRecord,
    loss: &LossConfig,
    grads: Option<(&mut Mlp, f64)>,
) -> Result<LossBreakdown> {
    let x = record.features_with_flags();
    let (logits, cache) = net.forward(&x)?;
    let probs = nn::stable_softmax(&logits)?;
    let ce = objectives::weighted_ce(&probs, record.label, &loss.class_weights);
    if let Some((g, scale)) = grads {
        let dz: Vec<f64> = objectives::weighted_ce_logit_grad(&probs, record.label, &loss.class_weights)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        net.backward_into(&cache, &dz, g)?;
    }
    Ok(LossBreakdown::compose(ce, 0.0, 0.0, loss))
}

macro_rules! single_net_trainable {
    ($ty:ty) => {
        impl Trainable for $ty {
            fn nets(&self) -> Vec<&Mlp> {
                vec![&self.net]
            }

            fn nets_mut(&mut self) -> Vec<&mut Mlp> {
                vec![&mut self.net]
            }

            fn zeros_like(&self) -> Self {
                Self {
                    net: self.net.zeros_like(),
                }
            }

            fn class_probs(&self, record: &SubjectRecord) -> Result<Vec<f64>> {
                nn::stable_softmax(&self.net.logits(&record.features_with_flags())?)
            }

            fn sample_loss(
                &self,
                record: &SubjectRecord,
                loss: &LossConfig,
                grads: Option<(&mut Self, f64)>,
            ) -> Result<LossBreakdown> {
                single_net_loss(&self.net, record, loss, grads.map(|(g, s)| (&mut g.net, s)))
            }
        }
    };
}

single_net_trainable!(ConcatMlp);
single_net_trainable!(LogReg);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateFusionNet {
    pub modality: String,
    pub features: Range<usize>,
    pub net: Mlp,
}

/// One classifier per modality; probabilities are averaged over available modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateFusion {
    pub nets: Vec<LateFusionNet>,
}

impl LateFusion {
    pub fn init(layout: &Layout, num_classes: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = layout
            .modalities
            .iter()
            .map(|m| {
                Ok(LateFusionNet {
                    modality: m.name.clone(),
                    features: m.features.clone(),
                    net: init_params_with(m.features.len(), hidden, num_classes, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LateFusion { nets })
    }

    fn check(&self, record: &SubjectRecord) -> Result<()> {
        if record.available.len() != self.nets.len() {
            return Err(Error::dims("modality availability", self.nets.len(), record.available.len()));
        }
        let needed = self.nets.iter().map(|n| n.features.end).max().unwrap_or(0);
        if record.features.len() < needed {
            return Err(Error::dims("record features", needed, record.features.len()));
        }
        if !record.available.iter().any(|a| *a) {
            return Err(Error::NoAvailableExperts);
        }
        Ok(())
    }

    /// Per-modality probabilities, `None` for missing modalities.
    pub fn modality_probs(&self, record: &SubjectRecord) -> Result<Vec<Option<Vec<f64>>>> {
        self.check(record)?;
        self.nets
            .iter()
            .zip(&record.available)
            .map(|(n, &avail)| {
                if avail {
                    Ok(Some(nn::stable_softmax(&n.net.logits(&record.features[n.features.clone()])?)?))
                } else {
                    Ok(None)
                }
            })
            .collect()
    }
}

/// Arithmetic mean of the available probability vectors.
pub fn average_probs(parts: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    let present: Vec<&Vec<f64>> = parts.iter().flatten().collect();
    let first = present.first().ok_or(Error::NoAvailableExperts)?;
    let mut out = vec![0.0; first.len()];
    for p in &present {
        if p.len() != out.len() {
            return Err(Error::dims("probability vector", out.len(), p.len()));
        }
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += v;
        }
    }
    let n = present.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

impl Trainable for LateFusion {
    fn nets(&self) -> Vec<&Mlp> {
        self.nets.iter().map(|n| &n.net).collect()
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        self.nets.iter_mut().map(|n| &mut n.net).collect()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.nets.iter_mut().for_each(|n| n.net.fill(0.0));
        z
    }

    fn class_probs(&self, record: &SubjectRecord) -> Result<Vec<f64>> {
        average_probs(&self.modality_probs(record)?)
    }

    /// Mean over available modalities of each sub-network's own weighted CE,
    /// so every sub-network is fit as an independent classifier.
    fn sample_loss(
        &self,
        record: &SubjectRecord,
        loss: &LossConfig,
        mut grads: Option<(&mut Self, f64)>,
    ) -> Result<LossBreakdown> {
        self.check(record)?;
        let n_avail = record.available.iter().filter(|a| **a).count() as f64;
        let mut ce = 0.0;
        for (i, n) in self.nets.iter().enumerate() {
            if !record.available[i] {
                continue;
            }
            let (logits, cache) = n.net.forward(&record.features[n.features.clone()])?;
            let probs = nn::stable_softmax(&logits)?;
            ce += objectives::weighted_ce(&probs, record.label, &loss.class_weights) / n_avail;
            if let Some((g, scale)) = grads.as_mut() {
                let s = *scale / n_avail;
                let dz: Vec<f64> = objectives::weighted_ce_logit_grad(&probs, record.label, &loss.class_weights)
                    .into_iter()
                    .map(|v| v * s)
                    .collect();
                n.net.backward_into(&cache, &dz, &mut g.nets[i].net)?;
            }
        }
        Ok(LossBreakdown::compose(ce, 0.0, 0.0, loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSchema;
    use crate::optim::AdamWConfig;
    use crate::train::{train, TrainConfig};
    use rand::Rng;

    fn layout3() -> Layout {
        FeatureSchema::from_json(
            r#"{"modalities":[
                {"name":"A","regions":[{"name":"r","columns":["a1","a2"]}]},
                {"name":"B","regions":[{"name":"s","columns":["b1"]},{"name":"t","columns":["b2","b3"]}]},
                {"name":"C","regions":[{"name":"u","columns":["c1"]}]}]}"#,
        )
        .unwrap()
        .layout()
        .unwrap()
    }

    fn record(rng: &mut ChaCha8Rng, available: Vec<bool>) -> SubjectRecord {
        SubjectRecord {
            id: "s".into(),
            features: (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
            available,
            label: rng.random_range(0..3),
        }
    }

    #[test]
    fn average_of_two_vectors() {
        let p = average_probs(&[Some(vec![0.6, 0.3, 0.1]), None, Some(vec![0.2, 0.5, 0.3])]).unwrap();
        for (a, b) in p.iter().zip([0.4, 0.4, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(average_probs(&[None, None]).is_err());
    }

    #[test]
    fn late_fusion_matches_independent_composition() {
        let layout = layout3();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = LateFusion::init(&layout, 3, &[5, 4], 9).unwrap();
        for _ in 0..50 {
            let r = record(&mut rng, vec![true, true, true]);
            let got = model.class_probs(&r).unwrap();
            let mut want = [0.0; 3];
            for n in &model.nets {
                let p = nn::stable_softmax(&n.net.logits(&r.features[n.features.clone()]).unwrap()).unwrap();
                for c in 0..3 {
                    want[c] += p[c] / 3.0;
                }
            }
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() <= 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let single = record(&mut rng, vec![false, true, false]);
        let b = &model.nets[1];
        let want = nn::stable_softmax(&b.net.logits(&single.features[b.features.clone()]).unwrap()).unwrap();
        assert_eq!(model.class_probs(&single).unwrap(), want);
        assert!(model.class_probs(&record(&mut rng, vec![false; 3])).is_err());
    }

    #[test]
    fn zero_nets_are_uniform() {
        let layout = layout3();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = record(&mut rng, vec![true, false, true]);
        let lr = LogReg::init(&layout, 3).unwrap();
        assert_eq!(lr.class_probs(&r).unwrap(), vec![1.0 / 3.0; 3]);
        let mut cm = ConcatMlp::init(&layout, 3, &[4], 0).unwrap();
        cm.net.fill(0.0);
        assert_eq!(cm.class_probs(&r).unwrap(), vec![1.0 / 3.0; 3]);
        assert_eq!(cm.net.in_dim(), 6 + 3);
    }

    fn fd_check<M: Trainable>(model: &M, records: &[SubjectRecord], loss: &LossConfig) {
        let mut grads = model.zeros_like();
        for r in records {
            model.sample_loss(r, loss, Some((&mut grads, 1.0))).unwrap();
        }
        let total = |m: &M| -> f64 { records.iter().map(|r| m.sample_loss(r, loss, None).unwrap().total).sum() };
        let h = 1e-6;
        let analytic: Vec<Vec<f64>> = grads.nets().iter().map(|n| n.params().collect()).collect();
        for (ni, g) in analytic.iter().enumerate() {
            for (pi, &ga) in g.iter().enumerate() {
                let mut plus = model.clone();
                *plus.nets_mut()[ni].param_mut(pi).unwrap() += h;
                let mut minus = model.clone();
                *minus.nets_mut()[ni].param_mut(pi).unwrap() -= h;
                let fd = (total(&plus) - total(&minus)) / (2.0 * h);
                assert!((fd - ga).abs() <= 1e-7f64.max(1e-4 * fd.abs()), "net {ni} param {pi}: {fd} vs {ga}");
            }
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let layout = layout3();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recs: Vec<SubjectRecord> = (0..6)
            .map(|i| record(&mut rng, vec![i % 3 != 0, true, i % 2 == 0]))
            .collect();
        let loss = LossConfig::new(vec![0.8, 1.1, 1.3], 0.01, 0.01).unwrap();
        // Nonzero biases keep pre-activations off the ReLU kink.
        fn jitter<M: Trainable>(mut m: M, rng: &mut ChaCha8Rng) -> M {
            for n in m.nets_mut() {
                n.for_each_param_mut(|p, _| *p += rng.random_range(-0.5..0.5));
            }
            m
        }
        fd_check(&jitter(LateFusion::init(&layout, 3, &[4, 3], 2).unwrap(), &mut rng), &recs, &loss);
        fd_check(&jitter(ConcatMlp::init(&layout, 3, &[4, 3], 2).unwrap(), &mut rng), &recs, &loss);
        fd_check(&jitter(LogReg::init(&layout, 3).unwrap(), &mut rng), &recs, &loss);
    }

    #[test]
    fn logreg_separates_one_dimensional_data() {
        let layout = FeatureSchema::from_json(r#"{"modalities":[{"name":"A","regions":[{"name":"r","columns":["x","dead"]}]}],"classes":["neg","pos"]}"#)
            .unwrap()
            .layout()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<SubjectRecord> = (0..200)
            .map(|i| {
                let label = i % 2;
                let x = if label == 1 { rng.random_range(0.2..2.0) } else { rng.random_range(-2.0..-0.2) };
                SubjectRecord {
                    id: i.to_string(),
                    features: vec![x, 0.0],
                    available: vec![true],
                    label,
                }
            })
            .collect();
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 10,
            batch_size: 16,
            seed: 1,
            optimizer: AdamWConfig {
                lr: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let (model, _) = train(LogReg::init(&layout, 2).unwrap(), &recs, 2, &cfg, &LossConfig::unweighted(2)).unwrap();
        let correct = recs
            .iter()
            .filter(|r| {
                let p = model.class_probs(r).unwrap();
                (p[1] > p[0]) == (r.label == 1)
            })
            .count();
        assert!(correct as f64 / recs.len() as f64 >= 0.99, "{correct}");
        // The always-zero column never receives gradient, so its weights stay at zero.
        for c in 0..2 {
            assert_eq!(model.net.layers()[0].weight(c, 1), 0.0);
        }
    }
}
