//! C ABI over the funmatch engine.
//!
//! Every entry point returns an [`FmStatus`]; on failure the message is kept
//! per thread and can be read with [`fm_last_error`]. Panics never cross the
//! boundary. Models are opaque [`FmModel`] handles released with
//! [`fm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use funmatch::data::parse_split_spec;
use funmatch::harness::{self, RunConfig};
use funmatch::losses::kl_distill_value;
use funmatch::models::{Checkpoint, Model};
use funmatch::optim::{inverse_pth_root, Decay, ScheduleConfig};
use funmatch::tensor::Tensor;
use funmatch::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    /// Bad argument: null pointer, invalid UTF-8, malformed spec, wrong size.
    InvalidArgument = 1,
    /// Config could not be parsed or validated.
    Config = 2,
    /// Training produced a non-finite loss.
    Divergence = 3,
    /// File missing, unreadable or corrupt.
    Io = 4,
    /// Numerical failure, e.g. a matrix that is not SPD.
    Numeric = 5,
    /// Internal panic (a bug).
    Panic = 6,
}

/// Schedule decay shape for [`fm_lr_at`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmDecay {
    Quadratic = 0,
    Cosine = 1,
}

/// Opaque handle to a loaded f32 model.
pub struct FmModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FmStatus {
    match e {
        Error::Asymmetric(_) | Error::NegativeEigenvalue(_) | Error::NonFinite(_) => {
            FmStatus::Numeric
        }
        Error::Divergence { .. } => FmStatus::Divergence,
        _ => match e.exit_code() {
            2 => {
                if matches!(e, Error::Config(_) | Error::Json(_)) {
                    FmStatus::Config
                } else {
                    FmStatus::InvalidArgument
                }
            }
            4 => FmStatus::Io,
            _ => FmStatus::InvalidArgument,
        },
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (FmStatus, String)>) -> FmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FmStatus::Panic
        }
    }
}

fn fail(e: Error) -> (FmStatus, String) {
    (status_of(&e), e.to_string())
}

fn bad(msg: impl Into<String>) -> (FmStatus, String) {
    (FmStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FmStatus, String)> {
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad(format!("{what} is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (FmStatus, String)> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (FmStatus, String)> {
    p.as_mut().ok_or_else(|| bad(format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(
    p: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (FmStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> Result<&'a mut [T], (FmStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Resolve a split spec such as `train[:98%]` against a split of `n`
/// examples, writing the half-open index range `[start, end)`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `start` and `end` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_split_range(
    spec: *const c_char,
    n: usize,
    start: *mut usize,
    end: *mut usize,
) -> FmStatus {
    guard(|| {
        let spec = parse_split_spec(str_arg(spec, "spec")?).map_err(|e| bad(e.to_string()))?;
        let r = spec.index_range(n);
        *out_arg(start, "start")? = r.start;
        *out_arg(end, "end")? = r.end;
        Ok(())
    })
}

/// Learning rate at `step` of a warmup + decay schedule.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_lr_at(
    peak_lr: f64,
    warmup_steps: usize,
    total_steps: usize,
    decay: FmDecay,
    step: usize,
    out: *mut f64,
) -> FmStatus {
    guard(|| {
        let sched = ScheduleConfig {
            peak_lr,
            warmup_steps,
            total_steps,
            decay: match decay {
                FmDecay::Quadratic => Decay::Quadratic,
                FmDecay::Cosine => Decay::Cosine,
            },
        };
        *out_arg(out, "out")? = sched.lr_at(step).map_err(fail)?;
        Ok(())
    })
}

/// `(A + eps·I)^(-1/p)` for a symmetric positive semi-definite `n×n` matrix
/// in row-major order. `out` receives `n·n` values and may alias nothing.
///
/// # Safety
/// `a` must point to `n*n` readable doubles and `out` to `n*n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn fm_inverse_pth_root(
    a: *const f64,
    n: usize,
    p: u32,
    eps: f64,
    out: *mut f64,
) -> FmStatus {
    guard(|| {
        let len = n.checked_mul(n).ok_or_else(|| bad("n*n overflows"))?;
        let a = slice_arg(a, len, "a")?;
        let out = slice_mut_arg(out, len, "out")?;
        let m = nalgebra_from_row_major(n, a);
        let x = inverse_pth_root(&m, p, eps).map_err(fail)?;
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = x[(i, j)];
            }
        }
        Ok(())
    })
}

fn nalgebra_from_row_major(n: usize, a: &[f64]) -> funmatch::optim::Matrix {
    funmatch::optim::Matrix::from_row_slice(n, n, a)
}

/// Temperature-scaled distillation KL between `[batch, classes]` logit
/// matrices (row-major), written to `out`.
///
/// # Safety
/// `student` and `teacher` must each point to `batch*classes` floats; `out`
/// must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fm_kl_distill(
    student: *const f32,
    teacher: *const f32,
    batch: usize,
    classes: usize,
    temperature: f64,
    out: *mut f32,
) -> FmStatus {
    guard(|| {
        let len = batch
            .checked_mul(classes)
            .ok_or_else(|| bad("batch*classes overflows"))?;
        let s = Tensor::new(
            vec![batch, classes],
            slice_arg(student, len, "student")?.to_vec(),
        )
        .map_err(fail)?;
        let t = Tensor::new(
            vec![batch, classes],
            slice_arg(teacher, len, "teacher")?.to_vec(),
        )
        .map_err(fail)?;
        *out_arg(out, "out")? = kl_distill_value(&s, &t, temperature).map_err(fail)?;
        Ok(())
    })
}

/// Load a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes. On
/// success `*out` owns a handle that must be released with [`fm_model_free`].
#[no_mangle]
pub unsafe extern "C" fn fm_model_load(path: *const c_char, out: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(path_arg(path, "path")?).map_err(fail)?;
        let params = ck.params_for(&ck.config).map_err(fail)?;
        let model = Model::from_parts(ck.config, params).map_err(fail)?;
        *out = Box::into_raw(Box::new(FmModel { model }));
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`fm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_model_free(model: *mut FmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input resolution, channel count and number of classes of a model.
///
/// # Safety
/// `model` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn fm_model_info(
    model: *const FmModel,
    resolution: *mut usize,
    channels: *mut usize,
    classes: *mut usize,
) -> FmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| bad("model is null"))?;
        let c = &m.model.config;
        for (p, v) in [
            (resolution, c.input_resolution),
            (channels, c.input_channels),
            (classes, c.num_classes),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Forward pass over `batch` NHWC images in [-1, 1] at `height×width`.
/// Writes `batch × classes` logits.
///
/// # Safety
/// `model` must be a live handle, `images` must hold
/// `batch*height*width*channels` floats and `logits` `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fm_model_forward(
    model: *const FmModel,
    images: *const f32,
    batch: usize,
    height: usize,
    width: usize,
    logits: *mut f32,
    logits_len: usize,
) -> FmStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| bad("model is null"))?.model;
        let c = m.config.input_channels;
        let len = [batch, height, width, c]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("input size overflows"))?;
        let need = batch * m.config.num_classes;
        if logits_len < need {
            return Err(bad(format!(
                "logits buffer holds {logits_len}, need {need}"
            )));
        }
        let x = Tensor::new(
            vec![batch, height, width, c],
            slice_arg(images, len, "images")?.to_vec(),
        )
        .map_err(fail)?;
        let y = m.predict(&x).map_err(fail)?;
        slice_mut_arg(logits, need, "logits")?.copy_from_slice(y.data());
        Ok(())
    })
}

fn run_from(config: &Path, out_dir: &Path, teacher: bool) -> Result<(), (FmStatus, String)> {
    let cfg = RunConfig::load(config).map_err(fail)?;
    if teacher {
        harness::train_teacher(&cfg, out_dir).map_err(fail)?;
    } else {
        harness::distill(&cfg, out_dir).map_err(fail)?;
    }
    Ok(())
}

/// Train a teacher from labels as described by a JSON run config. Outputs
/// go to `<out_dir>/<run_id>/`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fm_run_train_teacher(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> FmStatus {
    guard(|| {
        run_from(
            &path_arg(config_path, "config_path")?,
            &path_arg(out_dir, "out_dir")?,
            true,
        )
    })
}

/// Distill the configured teacher into the student of a JSON run config.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fm_run_distill(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> FmStatus {
    guard(|| {
        run_from(
            &path_arg(config_path, "config_path")?,
            &path_arg(out_dir, "out_dir")?,
            false,
        )
    })
}
