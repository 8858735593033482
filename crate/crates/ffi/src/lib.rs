//! C ABI over `repcone`.
//!
//! Every fallible call returns an [`RcStatus`]; on failure the message is
//! kept per thread and read back with [`rc_last_error_message`]. Handles are
//! opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use repcone::embed::{load_embeddings, EmbeddingSet};
use repcone::geometry::{fit_cone_view, relative_position, Cone, ConeFitConfig};
use repcone::metrics::{pearson, topo_pearson};
use repcone::replay::{replay_quota, ReplaySchedule};
use repcone::Error;

/// Outcome of a call. Zero is success; the rest mirror the library's error
/// categories.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Format = 3,
    Corruption = 4,
    Validation = 5,
    MissingLabels = 6,
    EmptySet = 7,
    Dimension = 8,
    UndefinedCorrelation = 9,
    NonFinite = 10,
    Spec = 11,
    MissingFile = 12,
    Io = 13,
    Json = 14,
    Panic = 15,
}

impl From<&Error> for RcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Format(_) => RcStatus::Format,
            Error::Corruption(_) => RcStatus::Corruption,
            Error::Validation(_) => RcStatus::Validation,
            Error::MissingLabels => RcStatus::MissingLabels,
            Error::EmptySet(_) => RcStatus::EmptySet,
            Error::Dimension { .. } => RcStatus::Dimension,
            Error::UndefinedCorrelation(_) => RcStatus::UndefinedCorrelation,
            Error::NonFinite(_) => RcStatus::NonFinite,
            Error::Spec(_) => RcStatus::Spec,
            Error::MissingFile(_) => RcStatus::MissingFile,
            Error::Io { .. } => RcStatus::Io,
            Error::Json(_) => RcStatus::Json,
        }
    }
}

/// A loaded embedding set.
pub struct RcEmbeddings(EmbeddingSet);

/// A fitted class cone.
pub struct RcCone(Cone);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(RcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(RcStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RcStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RcStatus::Panic
        }
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads an EMBV1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_embeddings_load(
    path: *const c_char,
    out: *mut *mut RcEmbeddings,
) -> RcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(RcStatus::InvalidUtf8, "path is not UTF-8".into()))?;
        let set = load_embeddings(path)?;
        *out = Box::into_raw(Box::new(RcEmbeddings(set)));
        Ok(())
    })
}

/// Builds a set from `rows × dim` row-major values. `labels` may be null
/// for an unlabeled set; otherwise it holds `rows` entries.
///
/// # Safety
/// `data` must hold `rows * dim` values, `labels` (if not null) `rows`
/// values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_embeddings_from_rows(
    data: *const f64,
    rows: usize,
    dim: usize,
    labels: *const u32,
    out: *mut *mut RcEmbeddings,
) -> RcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let count = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(RcStatus::Validation, "rows * dim overflows".into()))?;
        let values = slice_arg(data, count, "data")?.to_vec();
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice_arg(labels, rows, "labels")?.to_vec())
        };
        let mut classes = labels.clone().unwrap_or_default();
        classes.sort_unstable();
        classes.dedup();
        let set = EmbeddingSet::new("ffi", dim, values, labels, classes)?;
        *out = Box::into_raw(Box::new(RcEmbeddings(set)));
        Ok(())
    })
}

/// # Safety
/// `set` must come from this library and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rc_embeddings_free(set: *mut RcEmbeddings) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Row count, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_embeddings_len(set: *const RcEmbeddings) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Vector dimension, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_embeddings_dim(set: *const RcEmbeddings) -> usize {
    set.as_ref().map_or(0, |s| s.0.dim())
}

/// Fits the cone of `class_id` covering a `coverage` fraction of its rows.
///
/// # Safety
/// `set` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rc_fit_cone(
    set: *const RcEmbeddings,
    class_id: u32,
    coverage: f64,
    out: *mut *mut RcCone,
) -> RcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let set = handle(set, "set")?;
        let view = set.0.class_view(class_id)?;
        let config = ConeFitConfig::default().with_coverage(coverage);
        let fit = fit_cone_view(&view, &config, None)?;
        *out = Box::into_raw(Box::new(RcCone(fit.cone)));
        Ok(())
    })
}

/// # Safety
/// `cone` must come from this library and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rc_cone_free(cone: *mut RcCone) {
    if !cone.is_null() {
        drop(Box::from_raw(cone));
    }
}

/// Axis dimension, or 0 for a null handle.
///
/// # Safety
/// `cone` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_cone_dim(cone: *const RcCone) -> usize {
    cone.as_ref().map_or(0, |c| c.0.dim())
}

/// Copies the unit axis into `out`, which holds `len` values.
///
/// # Safety
/// `cone` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn rc_cone_axis(cone: *const RcCone, out: *mut f64, len: usize) -> RcStatus {
    guard(|| {
        let cone = handle(cone, "cone")?;
        if len != cone.0.dim() {
            return Err(Error::Dimension {
                expected: cone.0.dim(),
                got: len,
            }
            .into());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        slice::from_raw_parts_mut(out, len).copy_from_slice(&cone.0.axis);
        Ok(())
    })
}

/// Cosine of the cone's half-angle, or NaN for a null handle.
///
/// # Safety
/// `cone` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_cone_aperture(cone: *const RcCone) -> f64 {
    cone.as_ref().map_or(f64::NAN, |c| c.0.aperture)
}

/// Rows inside the fitted cone, or 0 for a null handle.
///
/// # Safety
/// `cone` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rc_cone_kept_count(cone: *const RcCone) -> usize {
    cone.as_ref().map_or(0, |c| c.0.kept_count)
}

/// Cosine between `v` and the cone axis.
///
/// # Safety
/// `v` must hold `len` values, `cone` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rc_relative_position(
    v: *const f64,
    len: usize,
    cone: *const RcCone,
    out: *mut f64,
) -> RcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cone = handle(cone, "cone")?;
        *out = relative_position(slice_arg(v, len, "v")?, &cone.0)?;
        Ok(())
    })
}

/// Pearson correlation of two length-`n` series.
///
/// # Safety
/// `x` and `y` must hold `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> RcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = pearson(slice_arg(x, n, "x")?, slice_arg(y, n, "y")?)?;
        Ok(())
    })
}

/// Topological-order coefficient of one class. `before` and `after` are
/// row-aligned `rows × dim` row-major matrices; `axis` has `dim` values.
///
/// # Safety
/// Buffers must hold the stated number of values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_topo_pearson(
    before: *const f64,
    after: *const f64,
    rows: usize,
    dim: usize,
    axis: *const f64,
    n: usize,
    out: *mut f64,
) -> RcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if dim == 0 {
            return Err(Fail(RcStatus::Validation, "dim must be positive".into()));
        }
        let count = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(RcStatus::Validation, "rows * dim overflows".into()))?;
        let b: Vec<&[f64]> = slice_arg(before, count, "before")?.chunks(dim).collect();
        let a: Vec<&[f64]> = slice_arg(after, count, "after")?.chunks(dim).collect();
        *out = topo_pearson(&b, &a, slice_arg(axis, dim, "axis")?, n)?;
        Ok(())
    })
}

/// Examples replayed per event for replay interval `interval` and rate
/// `rate`. An interval of 0 means no replay and yields 0.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rc_replay_quota(interval: u64, rate: f64, out: *mut u64) -> RcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let schedule = if interval == 0 {
            ReplaySchedule::seq()
        } else {
            ReplaySchedule::every(interval, rate)
        };
        schedule.validate()?;
        *out = replay_quota(&schedule).map_or(0, |q| q as u64);
        Ok(())
    })
}
