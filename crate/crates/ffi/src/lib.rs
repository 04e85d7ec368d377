//! C ABI over `loat-core`.
//!
//! Models live behind an opaque [`LoatModel`] handle. Every function returns
//! a [`LoatStatus`]; on failure the thread-local message from
//! [`loat_last_error`] says what went wrong. Matrices cross the boundary as
//! row-major `double` buffers. Panics never unwind into C: they are caught
//! and reported as [`LoatStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use loat_core::attacks::{pgd, AttackSpec, Norm};
use loat_core::dataset::LabeledBatch;
use loat_core::frn::{rademacher_bounds, radius_from_logits, BoundInputs};
use loat_core::math::{Matrix, RngStream};
use loat_core::mlp::{init, logits, InitScale, MlpConfig, WeightSet};
use loat_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Internal = 9,
}

/// Opaque handle to a trained or freshly initialised MLP.
pub struct LoatModel {
    weights: WeightSet,
}

/// Radius estimates; undefined subset radii are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LoatRadius {
    pub gamma_hat: f64,
    pub gamma_hat_c: f64,
    pub gamma_hat_m: f64,
    pub n_correct: usize,
    pub n_wrong: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LoatStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape { .. } | Error::Label { .. } | Error::Consistency(_) => LoatStatus::Shape,
            Error::Format { .. } => LoatStatus::Format,
            Error::Io { .. } => LoatStatus::Io,
            Error::NonFinite(_) | Error::Divergence { .. } => LoatStatus::Numeric,
            Error::Parameter(_) | Error::EmptySubset(_) | Error::UndefinedMetric(_) | Error::EmptyDraw | Error::Config { .. } => {
                LoatStatus::InvalidArgument
            }
            _ => LoatStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(LoatStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(LoatStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LoatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LoatStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LoatStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model<'a>(m: *const LoatModel) -> Result<&'a LoatModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn write_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), Failure> {
    if cap < src.len() {
        return Err(Failure(LoatStatus::BufferTooSmall, format!("need {} elements, buffer holds {cap}", src.len())));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

fn batch(inputs: &[f64], labels: &[u32], n: usize, dim: usize, classes: usize) -> Result<LabeledBatch, Failure> {
    let x = Matrix::from_vec(n, dim, inputs.to_vec())?;
    Ok(LabeledBatch::new(x, labels.iter().map(|&l| l as usize).collect(), classes)?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn loat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn loat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Initialises an MLP with layer widths `[d, H_1, …, K]`. `init_scale <= 0`
/// selects He scaling, otherwise a fixed standard deviation.
///
/// # Safety
/// `widths` must point to `n_widths` values and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn loat_model_init(
    widths: *const usize,
    n_widths: usize,
    seed: u64,
    init_scale: f64,
    out: *mut *mut LoatModel,
) -> LoatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let layer_widths = slice(widths, n_widths, "widths")?.to_vec();
        let init_rule = if init_scale > 0.0 { InitScale::Fixed(init_scale) } else { InitScale::He };
        let weights = init(&MlpConfig { layer_widths, seed, init: init_rule })?;
        *out = Box::into_raw(Box::new(LoatModel { weights }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn loat_model_load(file: *const c_char, out: *mut *mut LoatModel) -> LoatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let weights = WeightSet::load(path(file)?)?;
        *out = Box::into_raw(Box::new(LoatModel { weights }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library; `file` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn loat_model_save(m: *const LoatModel, file: *const c_char) -> LoatStatus {
    guard(|| Ok(model(m)?.weights.save(path(file)?)?))
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn loat_model_free(m: *mut LoatModel) {
    if !m.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(m))));
    }
}

/// Writes input width, output width and number of weight layers.
///
/// # Safety
/// `m` must come from this library; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn loat_model_shape(
    m: *const LoatModel,
    input_dim: *mut usize,
    output_dim: *mut usize,
    depth: *mut usize,
) -> LoatStatus {
    guard(|| {
        let w = &model(m)?.weights;
        for (p, v) in [(input_dim, w.input_dim()), (output_dim, w.output_dim()), (depth, w.depth())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Logits for `n` row-major inputs of the model's input width.
///
/// # Safety
/// `inputs` holds `n·d` values; `out` has room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn loat_model_forward(
    m: *const LoatModel,
    inputs: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> LoatStatus {
    guard(|| {
        let w = &model(m)?.weights;
        let x = Matrix::from_vec(n, w.input_dim(), slice(inputs, n * w.input_dim(), "inputs")?.to_vec())?;
        write_out(logits(w, &x)?.as_slice(), out, out_len)
    })
}

/// Logit-gap radius estimates over `n` rows of `classes` logits.
///
/// # Safety
/// `logits` holds `n·classes` values, `labels` holds `n`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn loat_radius(
    logit_values: *const f64,
    labels: *const u32,
    n: usize,
    classes: usize,
    out: *mut LoatRadius,
) -> LoatStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let f = Matrix::from_vec(n, classes, slice(logit_values, n * classes, "logits")?.to_vec())?;
        let y: Vec<usize> = slice(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        let est = radius_from_logits(&f, &y)?;
        *out = LoatRadius {
            gamma_hat: est.gamma_hat,
            gamma_hat_c: est.gamma_hat_c.unwrap_or(f64::NAN),
            gamma_hat_m: est.gamma_hat_m.unwrap_or(f64::NAN),
            n_correct: est.n_correct,
            n_wrong: est.n_wrong,
        };
        Ok(())
    })
}

/// Lower and upper complexity bounds from subset counts and radii.
///
/// # Safety
/// `lower` and `upper` must be writable.
#[no_mangle]
pub unsafe extern "C" fn loat_bounds(
    n_correct: usize,
    n_wrong: usize,
    classes: usize,
    gamma_hat_m: f64,
    gamma_ce: f64,
    lower: *mut f64,
    upper: *mut f64,
) -> LoatStatus {
    guard(|| {
        let (lo, hi) = (lower.as_mut().ok_or_else(|| null("lower"))?, upper.as_mut().ok_or_else(|| null("upper"))?);
        let b = rademacher_bounds(&BoundInputs { n: n_correct + n_wrong, n_correct, n_wrong, classes, gamma_hat_m, gamma_ce })?;
        *lo = b.lower;
        *hi = b.upper;
        Ok(())
    })
}

/// PGD adversarial inputs. `norm` is 0 for ℓ∞ and 2 for ℓ2.
///
/// # Safety
/// `inputs` holds `n·d` values, `labels` holds `n`; `out` has room for
/// `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn loat_pgd(
    m: *const LoatModel,
    inputs: *const f64,
    labels: *const u32,
    n: usize,
    norm: u32,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    random_start: bool,
    track_best: bool,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> LoatStatus {
    guard(|| {
        let w = &model(m)?.weights;
        let d = w.input_dim();
        let b = batch(slice(inputs, n * d, "inputs")?, slice(labels, n, "labels")?, n, d, w.output_dim())?;
        let norm = match norm {
            0 => Norm::Inf,
            2 => Norm::Two,
            other => return Err(invalid(format!("norm must be 0 (inf) or 2, got {other}"))),
        };
        let spec = AttackSpec { norm, epsilon, step_size, steps, random_start, track_best };
        let x = pgd(w, &b, &spec, &mut RngStream::new(seed))?;
        write_out(x.as_slice(), out, out_len)
    })
}
