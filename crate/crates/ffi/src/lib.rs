//! C ABI over the `ikrl` engine.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free` function. Every function returns an [`IkrlStatus`];
//! on failure a description is available from [`ikrl_last_error_message`]
//! on the same thread. Enumerations are passed as `uint32_t` using the
//! values of [`IkrlAggregation`], [`IkrlNorm`] and [`IkrlMode`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ikrl::evaluation::dissimilarity;
use ikrl::io::{load_checkpoint, read_features};
use ikrl::model::{encode_entity, energy};
use ikrl::{AggregationMode, Error, FeatureStore, ModelParams, Norm, ScoringMode};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IkrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    NonFinite = 6,
    MissingFeatures = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IkrlAggregation {
    Att = 0,
    Avg = 1,
    Max = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IkrlNorm {
    L1 = 0,
    L2 = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IkrlMode {
    Sbr = 0,
    Ibr = 1,
    Union = 2,
}

/// Trained parameters loaded from a checkpoint.
pub struct IkrlModel {
    params: ModelParams,
}

/// Image features loaded from a feature file.
pub struct IkrlFeatures {
    store: FeatureStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(IkrlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => IkrlStatus::Io,
            Error::Parse { .. } | Error::Format(_) => IkrlStatus::Format,
            Error::Dimension(_) => IkrlStatus::Dimension,
            Error::NonFinite(_) => IkrlStatus::NonFinite,
            Error::MissingFeatures { .. } => IkrlStatus::MissingFeatures,
            _ => IkrlStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IkrlStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IkrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            IkrlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            IkrlStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(IkrlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(IkrlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure(IkrlStatus::NullPointer, "path is null".to_owned()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

fn aggregation(v: u32) -> Result<AggregationMode, Failure> {
    match v {
        0 => Ok(AggregationMode::Att),
        1 => Ok(AggregationMode::Avg),
        2 => Ok(AggregationMode::Max),
        _ => Err(invalid(format!("unknown aggregation {v}"))),
    }
}

fn norm(v: u32) -> Result<Norm, Failure> {
    match v {
        0 => Ok(Norm::L1),
        1 => Ok(Norm::L2),
        _ => Err(invalid(format!("unknown norm {v}"))),
    }
}

fn check_triple(params: &ModelParams, h: usize, r: usize, t: usize) -> Result<(), Failure> {
    let ne = params.num_entities();
    if h >= ne || t >= ne || r >= params.num_relations() {
        return Err(invalid(format!(
            "triple ({h}, {r}, {t}) out of range for {ne} entities and {} relations",
            params.num_relations()
        )));
    }
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ikrl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ikrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ikrl_model_load(path: *const c_char, out: *mut *mut IkrlModel) -> IkrlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let params = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(IkrlModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ikrl_model_load`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ikrl_model_free(model: *mut IkrlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; each output pointer must be valid or null
/// (null outputs are skipped).
#[no_mangle]
pub unsafe extern "C" fn ikrl_model_dims(
    model: *const IkrlModel,
    num_entities: *mut usize,
    num_relations: *mut usize,
    entity_dim: *mut usize,
    image_dim: *mut usize,
) -> IkrlStatus {
    guard(|| {
        let p = &non_null(model, "model")?.params;
        for (dst, v) in [
            (num_entities, p.num_entities()),
            (num_relations, p.num_relations()),
            (entity_dim, p.entity_dim()),
            (image_dim, p.image_dim()),
        ] {
            if let Some(dst) = dst.as_mut() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Loads a feature file into a new features handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ikrl_features_load(path: *const c_char, out: *mut *mut IkrlFeatures) -> IkrlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let store = read_features(path_arg(path)?, None)?;
        *out = Box::into_raw(Box::new(IkrlFeatures { store }));
        Ok(())
    })
}

/// # Safety
/// `features` must come from [`ikrl_features_load`] and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ikrl_features_free(features: *mut IkrlFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Total training energy of `(h, r, t)`: the sum of the structure/structure,
/// structure/image, image/structure and image/image translation terms.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ikrl_energy(
    model: *const IkrlModel,
    features: *const IkrlFeatures,
    head: usize,
    relation: usize,
    tail: usize,
    aggregation_mode: u32,
    norm_kind: u32,
    out: *mut f64,
) -> IkrlStatus {
    guard(|| {
        let p = &non_null(model, "model")?.params;
        let store = &non_null(features, "features")?.store;
        let out = out_ptr(out, "out")?;
        check_triple(p, head, relation, tail)?;
        *out = energy(
            head,
            relation,
            tail,
            p,
            store,
            aggregation(aggregation_mode)?,
            norm(norm_kind)?,
        )?
        .total;
        Ok(())
    })
}

/// Evaluation score of `(h, r, t)`; lower is more plausible. `features` may
/// be null in structure mode. `alpha` is used only in union mode.
///
/// # Safety
/// `model` must be live, `features` live or null, `out` valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ikrl_dissimilarity(
    model: *const IkrlModel,
    features: *const IkrlFeatures,
    head: usize,
    relation: usize,
    tail: usize,
    mode: u32,
    alpha: f64,
    aggregation_mode: u32,
    norm_kind: u32,
    out: *mut f64,
) -> IkrlStatus {
    guard(|| {
        let p = &non_null(model, "model")?.params;
        let store = features.as_ref().map(|f| &f.store);
        let out = out_ptr(out, "out")?;
        check_triple(p, head, relation, tail)?;
        let mode = match mode {
            0 => ScoringMode::Sbr,
            1 => ScoringMode::Ibr,
            2 => ScoringMode::union(alpha)?,
            _ => return Err(invalid(format!("unknown scoring mode {mode}"))),
        };
        *out = dissimilarity(
            head,
            relation,
            tail,
            p,
            store,
            aggregation(aggregation_mode)?,
            mode,
            norm(norm_kind)?,
        )?;
        Ok(())
    })
}

/// Writes the aggregated image representation of `entity` into `buf`, which
/// must hold exactly the model's entity dimension.
///
/// # Safety
/// Handles must be live and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ikrl_entity_ibr(
    model: *const IkrlModel,
    features: *const IkrlFeatures,
    entity: usize,
    aggregation_mode: u32,
    buf: *mut f64,
    len: usize,
) -> IkrlStatus {
    guard(|| {
        let p = &non_null(model, "model")?.params;
        let store = &non_null(features, "features")?.store;
        if buf.is_null() {
            return Err(Failure(IkrlStatus::NullPointer, "buf is null".to_owned()));
        }
        if entity >= p.num_entities() {
            return Err(invalid(format!("entity {entity} out of range")));
        }
        if len != p.entity_dim() {
            return Err(Failure(
                IkrlStatus::Dimension,
                format!(
                    "buffer holds {len} values, entity dimension is {}",
                    p.entity_dim()
                ),
            ));
        }
        let v = encode_entity(entity, p, store, aggregation(aggregation_mode)?)?.aggregated;
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Attention weights over `entity`'s images, in stored image order.
/// `count` receives the number of images; if `len` is smaller the call
/// fails with `BufferTooSmall` and writes nothing else.
///
/// # Safety
/// Handles must be live, `count` valid and `buf` must point to `len`
/// writable doubles (it may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn ikrl_attention(
    model: *const IkrlModel,
    features: *const IkrlFeatures,
    entity: usize,
    buf: *mut f64,
    len: usize,
    count: *mut usize,
) -> IkrlStatus {
    guard(|| {
        let p = &non_null(model, "model")?.params;
        let store = &non_null(features, "features")?.store;
        let count = out_ptr(count, "count")?;
        if entity >= p.num_entities() {
            return Err(invalid(format!("entity {entity} out of range")));
        }
        let weights = encode_entity(entity, p, store, AggregationMode::Att)?.weights;
        *count = weights.len();
        if len < weights.len() {
            return Err(Failure(
                IkrlStatus::BufferTooSmall,
                format!("{} weights do not fit in {len}", weights.len()),
            ));
        }
        if buf.is_null() {
            return Err(Failure(IkrlStatus::NullPointer, "buf is null".to_owned()));
        }
        std::slice::from_raw_parts_mut(buf, weights.len()).copy_from_slice(&weights);
        Ok(())
    })
}
