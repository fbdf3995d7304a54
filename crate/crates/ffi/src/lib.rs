//! C ABI over model bundles and schemas.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns an [`RmStatus`];
//! on failure, [`rm_last_error_message`] describes the most recent error on
//! the calling thread. Panics are caught at the boundary and reported as
//! `RM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use regional_moe::data::{load_schema, FeatureSchema, Layout, SubjectRecord};
use regional_moe::metrics;
use regional_moe::models::ModelBundle;
use regional_moe::Error;

/// Result codes shared by every function of the library.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Json = 4,
    Csv = 5,
    Schema = 6,
    Data = 7,
    DimensionMismatch = 8,
    InvalidConfig = 9,
    NoAvailableExperts = 10,
    NonFinite = 11,
    EmptyInput = 12,
    BufferTooSmall = 13,
    NotAMixtureModel = 14,
    Panic = 15,
}

impl From<&Error> for RmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::DimensionMismatch { .. } => RmStatus::DimensionMismatch,
            Error::EmptyInput(_) => RmStatus::EmptyInput,
            Error::NonFinite(_) => RmStatus::NonFinite,
            Error::InvalidConfig(_) => RmStatus::InvalidConfig,
            Error::NoAvailableExperts => RmStatus::NoAvailableExperts,
            Error::Schema(_) => RmStatus::Schema,
            Error::Data(_) => RmStatus::Data,
            Error::Io { .. } => RmStatus::Io,
            Error::Json(_) => RmStatus::Json,
            Error::Csv(_) => RmStatus::Csv,
        }
    }
}

/// Opaque handle to a feature schema.
pub struct RmSchema {
    schema: FeatureSchema,
    layout: Layout,
}

/// Opaque handle to a trained model bundle.
pub struct RmModel {
    bundle: ModelBundle,
    layout: Layout,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(RmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(RmStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RmStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside the library");
            RmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(RmStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn rm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a schema JSON file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rm_schema_load(path: *const c_char, out: *mut *mut RmSchema) -> RmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let schema = load_schema(path_arg(path)?)?;
        let layout = schema.layout()?;
        *out = Box::into_raw(Box::new(RmSchema { schema, layout }));
        Ok(())
    })
}

/// # Safety
/// `schema` must come from [`rm_schema_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rm_schema_free(schema: *mut RmSchema) {
    if !schema.is_null() {
        drop(Box::from_raw(schema));
    }
}

/// Dense feature count (after one-hot expansion); 0 for a null handle.
///
/// # Safety
/// `schema` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_schema_num_features(schema: *const RmSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.layout.num_features())
}

/// # Safety
/// `schema` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_schema_num_modalities(schema: *const RmSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.layout.num_modalities())
}

/// Number of (modality, region) blocks, one expert each.
///
/// # Safety
/// `schema` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_schema_num_experts(schema: *const RmSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.layout.num_blocks())
}

/// # Safety
/// `schema` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_schema_num_classes(schema: *const RmSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.schema.num_classes())
}

/// Loads a model bundle JSON file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rm_model_load(path: *const c_char, out: *mut *mut RmModel) -> RmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let bundle = ModelBundle::load(path_arg(path)?)?;
        let layout = bundle.layout()?;
        *out = Box::into_raw(Box::new(RmModel { bundle, layout }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rm_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rm_model_free(model: *mut RmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_model_num_features(model: *const RmModel) -> usize {
    model.as_ref().map_or(0, |m| m.layout.num_features())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_model_num_modalities(model: *const RmModel) -> usize {
    model.as_ref().map_or(0, |m| m.layout.num_modalities())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_model_num_classes(model: *const RmModel) -> usize {
    model.as_ref().map_or(0, |m| m.bundle.num_classes())
}

/// Expert count of a mixture model; 0 for baselines and null handles.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_model_num_experts(model: *const RmModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.bundle.model.as_moe())
        .map_or(0, |m| m.num_experts())
}

unsafe fn raw_record(
    m: &RmModel,
    features: *const f64,
    n_features: usize,
    available: *const u8,
    n_modalities: usize,
) -> Result<SubjectRecord, Failure> {
    let f = slice(features, n_features, "features")?;
    let a = slice(available, n_modalities, "available")?;
    if f.len() != m.layout.num_features() {
        return Err(Error::DimensionMismatch {
            context: "features".into(),
            expected: m.layout.num_features(),
            actual: f.len(),
        }
        .into());
    }
    if a.len() != m.layout.num_modalities() {
        return Err(Error::DimensionMismatch {
            context: "availability flags".into(),
            expected: m.layout.num_modalities(),
            actual: a.len(),
        }
        .into());
    }
    Ok(SubjectRecord {
        id: String::new(),
        features: f.to_vec(),
        available: a.iter().map(|v| *v != 0).collect(),
        label: 0,
    })
}

/// Class probabilities for one raw (unnormalized) subject.
///
/// `features` holds the dense feature vector in schema order; values of
/// unavailable modalities are ignored. `available` holds one 0/1 flag per
/// modality. `probs_out` receives `n_classes` values.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rm_model_predict(
    model: *const RmModel,
    features: *const f64,
    n_features: usize,
    available: *const u8,
    n_modalities: usize,
    probs_out: *mut f64,
    n_classes: usize,
) -> RmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let record = raw_record(m, features, n_features, available, n_modalities)?;
        let c = m.bundle.num_classes();
        if n_classes < c {
            return Err(Failure(RmStatus::BufferTooSmall, format!("probs_out needs {c} slots")));
        }
        let out = slice_mut(probs_out, n_classes, "probs_out")?;
        let probs = m.bundle.predict_raw(&record)?;
        out[..c].copy_from_slice(&probs);
        Ok(())
    })
}

/// Final per-expert gate weights for one raw subject (mixture models only).
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rm_model_gate_weights(
    model: *const RmModel,
    features: *const f64,
    n_features: usize,
    available: *const u8,
    n_modalities: usize,
    weights_out: *mut f64,
    n_experts: usize,
) -> RmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let moe = m
            .bundle
            .model
            .as_moe()
            .ok_or_else(|| Failure(RmStatus::NotAMixtureModel, "bundle holds a baseline model".into()))?;
        let record = raw_record(m, features, n_features, available, n_modalities)?;
        let n = moe.num_experts();
        if n_experts < n {
            return Err(Failure(RmStatus::BufferTooSmall, format!("weights_out needs {n} slots")));
        }
        let out = slice_mut(weights_out, n_experts, "weights_out")?;
        let norm = m.bundle.normalize(&record)?;
        let g = moe.fuse_predict(&norm)?.gate.weights;
        out[..n].copy_from_slice(&g);
        Ok(())
    })
}

/// Macro one-vs-rest AUROC. `probs` is row-major `n_samples x n_classes`.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rm_macro_auroc(
    labels: *const u32,
    probs: *const f64,
    n_samples: usize,
    n_classes: usize,
    out: *mut f64,
) -> RmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let y: Vec<usize> = slice(labels, n_samples, "labels")?.iter().map(|v| *v as usize).collect();
        let flat = slice(probs, n_samples * n_classes, "probs")?;
        let rows: Vec<Vec<f64>> = flat.chunks(n_classes.max(1)).map(<[f64]>::to_vec).collect();
        *out = metrics::macro_auroc(&y, &rows, n_classes)?;
        Ok(())
    })
}
