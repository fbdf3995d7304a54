//! Classification metrics and fold aggregation.
//!
//! Macro AUROC is the unweighted mean over classes of the one-vs-rest AUC,
//! computed with the Mann-Whitney rank-sum statistic (ties get average ranks,
//! which is the same as half credit for tied pairs). Macro F1 counts a class
//! with no predicted and no true members as F1 = 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dims("predictions", y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// `C x C` counts, rows are true classes.
pub fn confusion(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dims("predictions", y_true.len(), y_pred.len()));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Data(format!("label {} out of range for {num_classes} classes", t.max(p))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn macro_f1(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::EmptyInput("macro F1"));
    }
    let m = confusion(y_true, y_pred, num_classes)?;
    let mut sum = 0.0;
    for c in 0..num_classes {
        let tp = m[c][c] as f64;
        let predicted: usize = (0..num_classes).map(|r| m[r][c]).sum();
        let actual: usize = m[c].iter().sum();
        let denom = (predicted + actual) as f64;
        if denom > 0.0 {
            sum += 2.0 * tp / denom;
        }
    }
    Ok(sum / num_classes as f64)
}

/// Binary AUC of `scores` for `positive` labels; `None` when a side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest AUROC averaged over classes. Every class must occur and not be
/// the only class present.
pub fn macro_auroc(y_true: &[usize], probs: &[Vec<f64>], num_classes: usize) -> Result<f64> {
    if y_true.len() != probs.len() {
        return Err(Error::dims("probability rows", y_true.len(), probs.len()));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyInput("macro AUROC"));
    }
    let mut sum = 0.0;
    for c in 0..num_classes {
        let mut scores = Vec::with_capacity(probs.len());
        for row in probs {
            if row.len() != num_classes {
                return Err(Error::dims("probability row", num_classes, row.len()));
            }
            if !row[c].is_finite() {
                return Err(Error::NonFinite("class probability"));
            }
            scores.push(row[c]);
        }
        let positive: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        sum += binary_auroc(&scores, &positive)
            .ok_or_else(|| Error::Data(format!("AUROC undefined: class {c} has no positive or no negative samples")))?;
    }
    Ok(sum / num_classes as f64)
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("spearman inputs", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput("spearman needs at least two points"));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Data("correlation undefined for a constant input".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Held-out metrics for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fold: usize,
    pub auroc_macro: f64,
    pub accuracy: f64,
    pub f1_macro: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalResult {
    pub fn compute(fold: usize, y_true: &[usize], probs: &[Vec<f64>], num_classes: usize) -> Result<Self> {
        let y_pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        Ok(EvalResult {
            fold,
            auroc_macro: macro_auroc(y_true, probs, num_classes)?,
            accuracy: accuracy(y_true, &y_pred)?,
            f1_macro: macro_f1(y_true, &y_pred, num_classes)?,
            confusion: confusion(y_true, &y_pred, num_classes)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); `None` with fewer than two folds.
    pub sd: Option<f64>,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("fold summary"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Ok(MeanSd { mean, sd })
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.sd {
            Some(sd) => write!(f, "{:.3} ± {:.3}", self.mean, sd),
            None => write!(f, "{:.3} (single fold, no SD)", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: Vec<EvalResult>,
    pub auroc_macro: MeanSd,
    pub accuracy: MeanSd,
    pub f1_macro: MeanSd,
}

impl FoldSummary {
    pub fn new(folds: Vec<EvalResult>) -> Result<Self> {
        let col = |f: fn(&EvalResult) -> f64| folds.iter().map(f).collect::<Vec<_>>();
        Ok(FoldSummary {
            auroc_macro: MeanSd::of(&col(|e| e.auroc_macro))?,
            accuracy: MeanSd::of(&col(|e| e.accuracy))?,
            f1_macro: MeanSd::of(&col(|e| e.f1_macro))?,
            folds,
        })
    }

    /// `fold,auroc_macro,accuracy,f1_macro` rows followed by `mean` and `sd` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,auroc_macro,accuracy,f1_macro\n");
        for e in &self.folds {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", e.fold, e.auroc_macro, e.accuracy, e.f1_macro));
        }
        out.push_str(&format!(
            "mean,{:?},{:?},{:?}\n",
            self.auroc_macro.mean, self.accuracy.mean, self.f1_macro.mean
        ));
        let sd = |m: &MeanSd| m.sd.map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!(
            "sd,{},{},{}\n",
            sd(&self.auroc_macro),
            sd(&self.accuracy),
            sd(&self.f1_macro)
        ));
        out
    }
}
