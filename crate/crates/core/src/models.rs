//! Model selection and the versioned on-disk model bundle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{ConcatMlp, LateFusion, LogReg};
use crate::data::{FeatureSchema, Layout, NormStats, SubjectRecord};
use crate::error::{Error, Result};
use crate::moe::{GateMode, GateOutput, MoeConfig, MoeModel};
use crate::nn::{Mlp, DEFAULT_HIDDEN, SCHEMA_VERSION};
use crate::objectives::{LossBreakdown, LossConfig};
use crate::train::Trainable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mref,
    Concat,
    Late,
    Logreg,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mref" => Ok(ModelKind::Mref),
            "concat" => Ok(ModelKind::Concat),
            "late" => Ok(ModelKind::Late),
            "logreg" => Ok(ModelKind::Logreg),
            other => Err(Error::InvalidConfig(format!(
                "unknown model '{other}' (expected mref, concat, late or logreg)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mref => "mref",
            ModelKind::Concat => "concat",
            ModelKind::Late => "late",
            ModelKind::Logreg => "logreg",
        })
    }
}

/// Architecture choice shared by every model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub gate_mode: GateMode,
    pub top_k: Option<usize>,
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Mref,
            gate_mode: GateMode::Hierarchical,
            top_k: None,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl ModelSpec {
    pub fn build(&self, layout: &Layout, num_classes: usize, seed: u64) -> Result<AnyModel> {
        Ok(match self.kind {
            ModelKind::Mref => {
                let cfg = MoeConfig::from_layout(layout, num_classes, self.gate_mode, self.top_k, &self.hidden)?;
                AnyModel::Mref(MoeModel::init(layout, cfg, seed)?)
            }
            ModelKind::Concat => AnyModel::Concat(ConcatMlp::init(layout, num_classes, &self.hidden, seed)?),
            ModelKind::Late => AnyModel::Late(LateFusion::init(layout, num_classes, &self.hidden, seed)?),
            ModelKind::Logreg => AnyModel::Logreg(LogReg::init(layout, num_classes)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum AnyModel {
    Mref(MoeModel),
    Concat(ConcatMlp),
    Late(LateFusion),
    Logreg(LogReg),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Mref(_) => ModelKind::Mref,
            AnyModel::Concat(_) => ModelKind::Concat,
            AnyModel::Late(_) => ModelKind::Late,
            AnyModel::Logreg(_) => ModelKind::Logreg,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeModel> {
        match self {
            AnyModel::Mref(m) => Some(m),
            _ => None,
        }
    }

    /// Final per-expert gate weights, for mixture models only.
    pub fn gate(&self, record: &SubjectRecord) -> Result<Option<GateOutput>> {
        match self {
            AnyModel::Mref(m) => Ok(Some(m.fuse_predict(record)?.gate)),
            _ => Ok(None),
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Mref($m) => $body,
            AnyModel::Concat($m) => $body,
            AnyModel::Late($m) => $body,
            AnyModel::Logreg($m) => $body,
        }
    };
}

impl Trainable for AnyModel {
    fn nets(&self) -> Vec<&Mlp> {
        dispatch!(self, m => Trainable::nets(m))
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        dispatch!(self, m => Trainable::nets_mut(m))
    }

    fn zeros_like(&self) -> Self {
        match self {
            AnyModel::Mref(m) => AnyModel::Mref(Trainable::zeros_like(m)),
            AnyModel::Concat(m) => AnyModel::Concat(Trainable::zeros_like(m)),
            AnyModel::Late(m) => AnyModel::Late(Trainable::zeros_like(m)),
            AnyModel::Logreg(m) => AnyModel::Logreg(Trainable::zeros_like(m)),
        }
    }

    fn class_probs(&self, record: &SubjectRecord) -> Result<Vec<f64>> {
        dispatch!(self, m => Trainable::class_probs(m, record))
    }

    fn sample_loss(
        &self,
        record: &SubjectRecord,
        loss: &LossConfig,
        grads: Option<(&mut Self, f64)>,
    ) -> Result<LossBreakdown> {
        let mismatch = || Error::InvalidConfig("gradient buffer holds a different model kind".into());
        match (self, grads) {
            (m, None) => dispatch!(m, x => Trainable::sample_loss(x, record, loss, None)),
            (AnyModel::Mref(m), Some((AnyModel::Mref(g), s))) => Trainable::sample_loss(m, record, loss, Some((g, s))),
            (AnyModel::Concat(m), Some((AnyModel::Concat(g), s))) => {
                Trainable::sample_loss(m, record, loss, Some((g, s)))
            }
            (AnyModel::Late(m), Some((AnyModel::Late(g), s))) => Trainable::sample_loss(m, record, loss, Some((g, s))),
            (AnyModel::Logreg(m), Some((AnyModel::Logreg(g), s))) => {
                Trainable::sample_loss(m, record, loss, Some((g, s)))
            }
            _ => Err(mismatch()),
        }
    }
}

/// A trained model together with everything needed to score raw records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub schema: FeatureSchema,
    pub spec: ModelSpec,
    pub norm_stats: NormStats,
    pub model: AnyModel,
}

impl ModelBundle {
    pub fn new(schema: FeatureSchema, spec: ModelSpec, norm_stats: NormStats, model: AnyModel) -> Self {
        ModelBundle {
            schema_version: SCHEMA_VERSION,
            schema,
            spec,
            norm_stats,
            model,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: ModelBundle = serde_json::from_str(text)?;
        if b.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported bundle schema_version {} (expected {SCHEMA_VERSION})",
                b.schema_version
            )));
        }
        if b.model.kind() != b.spec.kind {
            return Err(Error::Schema("bundle model kind disagrees with its spec".into()));
        }
        let layout = b.schema.layout()?;
        if b.norm_stats.mean.len() != layout.num_features() || b.norm_stats.std.len() != layout.num_features() {
            return Err(Error::dims("bundle normalization", layout.num_features(), b.norm_stats.mean.len()));
        }
        Ok(b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn layout(&self) -> Result<Layout> {
        self.schema.layout()
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }

    /// Normalizes a raw record with the stored statistics.
    pub fn normalize(&self, record: &SubjectRecord) -> Result<SubjectRecord> {
        self.norm_stats.apply_one(record, &self.layout()?)
    }

    /// Class probabilities for a raw (unnormalized) record.
    pub fn predict_raw(&self, record: &SubjectRecord) -> Result<Vec<f64>> {
        self.model.class_probs(&self.normalize(record)?)
    }
}
