//! Mini-batch training with AdamW and early stopping on an inner validation split.
//!
//! Randomness comes from ChaCha8 generators seeded with `seed_from_u64(seed)`
//! and separated by stream id: epoch `e` shuffles with stream `e`, the inner
//! validation split of class `c` uses stream `2^32 + c`. Shuffles are
//! Fisher-Yates as implemented by `rand::seq::SliceRandom`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_counts, SubjectRecord};
use crate::error::{Error, Result};
use crate::moe::MoeModel;
use crate::nn::Mlp;
use crate::objectives::{LossBreakdown, LossConfig};
use crate::optim::{AdamW, AdamWConfig};

const SPLIT_STREAM: u64 = 1 << 32;

/// A model the training loop can optimize.
pub trait Trainable: Clone {
    /// Every parameter-bearing network, in a stable order.
    fn nets(&self) -> Vec<&Mlp>;
    fn nets_mut(&mut self) -> Vec<&mut Mlp>;
    /// Same structure with all parameters zero, used as a gradient buffer.
    fn zeros_like(&self) -> Self;
    fn class_probs(&self, record: &SubjectRecord) -> Result<Vec<f64>>;
    /// Per-sample loss; accumulates `scale` times its gradient into `grads` when given.
    fn sample_loss(
        &self,
        record: &SubjectRecord,
        loss: &LossConfig,
        grads: Option<(&mut Self, f64)>,
    ) -> Result<LossBreakdown>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 40,
            patience: 10,
            batch_size: 64,
            val_fraction: 0.1,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.patience > self.max_epochs && self.max_epochs > 0 {
            return Err(Error::InvalidConfig("patience exceeds max_epochs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_epoch: usize,
}

impl TrainTrace {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e - 1].val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:?},{:?}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

/// Stops once the monitored loss has failed to strictly improve for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch's loss; returns `(improved, should_stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| loss < b);
        if improved {
            self.best = Some((epoch, loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

/// Deterministic permutation of `0..n` for a given seed and epoch.
pub fn seeded_shuffle(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx
}

/// Stratified train/validation split over record indices.
pub fn stratified_split(
    records: &[SubjectRecord],
    num_classes: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let counts = class_counts(records.iter().map(|r| r.label), num_classes);
    if let Some(c) = counts.iter().position(|n| *n == 0) {
        return Err(Error::Data(format!(
            "class {c} is absent from the training data; use a larger fold or a smaller val_fraction"
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SPLIT_STREAM + c as u64);
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * val_fraction).round() as usize).min(members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Mean per-sample loss, no gradients.
pub fn mean_loss<M: Trainable>(model: &M, records: &[&SubjectRecord], loss: &LossConfig) -> Result<LossBreakdown> {
    let parts = records
        .iter()
        .map(|r| model.sample_loss(r, loss, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&parts, loss))
}

/// Batch-mean objective and its gradient.
pub fn total_loss<M: Trainable>(model: &M, batch: &[&SubjectRecord], loss: &LossConfig) -> Result<(LossBreakdown, M)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss batch"));
    }
    let mut grads = model.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .iter()
        .map(|r| model.sample_loss(r, loss, Some((&mut grads, scale))))
        .collect::<Result<Vec<_>>>()?;
    Ok((LossBreakdown::mean(&parts, loss), grads))
}

/// Trains on `records`, holding out a stratified validation split for early
/// stopping, and returns the parameters of the best validation epoch.
pub fn train<M: Trainable>(
    model: M,
    records: &[SubjectRecord],
    num_classes: usize,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<(M, TrainTrace)> {
    cfg.validate()?;
    if cfg.max_epochs == 0 {
        return Ok((model, TrainTrace::default()));
    }
    let (train_idx, val_idx) = stratified_split(records, num_classes, cfg.val_fraction, cfg.seed)?;
    let val: Vec<&SubjectRecord> = val_idx.iter().map(|&i| &records[i]).collect();

    let mut model = model;
    let mut best = model.clone();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut trace = TrainTrace::default();
    for epoch in 1..=cfg.max_epochs {
        let order = seeded_shuffle(train_idx.len(), cfg.seed, epoch as u64);
        let mut running = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SubjectRecord> = chunk.iter().map(|&i| &records[train_idx[i]]).collect();
            let (parts, grads) = total_loss(&model, &batch, loss)?;
            running += parts.total * batch.len() as f64;
            opt.step(model.nets_mut(), grads.nets())?;
        }
        let train_loss = running / train_idx.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_loss(&model, &val, loss)?.total
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        trace.stopped_epoch = epoch;
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.clone();
        }
        if stop {
            break;
        }
    }
    trace.best_epoch = stopper.best_epoch();
    Ok((best, trace))
}

impl Trainable for MoeModel {
    fn nets(&self) -> Vec<&Mlp> {
        MoeModel::nets(self)
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        MoeModel::nets_mut(self)
    }

    fn zeros_like(&self) -> Self {
        MoeModel::zeros_like(self)
    }

    fn class_probs(&self, record: &SubjectRecord) -> Result<Vec<f64>> {
        Ok(self.fuse_predict(record)?.class_probs)
    }

    fn sample_loss(
        &self,
        record: &SubjectRecord,
        loss: &LossConfig,
        grads: Option<(&mut Self, f64)>,
    ) -> Result<LossBreakdown> {
        MoeModel::sample_loss(self, record, loss, grads)
    }
}
