//! Two-level hierarchical mixture-of-experts classification for multimodal
//! tabular data, with fusion baselines, cross-validated evaluation, ablations
//! and gate-based attribution reports.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod moe;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Schema shaped like the reference cohort: MRI and PET over 14 regions each
/// plus a single-region demographic block, 29 experts in total. Synthetic
/// cohorts from the default [`synth::SynthSpec`] load against it.
pub const ADNI_LIKE_SCHEMA: &str = include_str!("../schemas/adni_like.schema");
