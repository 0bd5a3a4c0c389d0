//! C ABI for the rescuenet engine.
//!
//! Every function returns an [`RnStatus`]; on failure a description is
//! available from [`rn_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rescuenet::data::{generate_dataset, save_dataset, GeneratorConfig};
use rescuenet::metrics::{ConfusionMatrix, EvalReport};
use rescuenet::model::{Fusion, RescueNet};
use rescuenet::tensor::Tensor;
use rescuenet::train::load_checkpoint;
use rescuenet::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RnStatus {
    Ok = 0,
    /// Null pointer, bad length or out-of-range value.
    InvalidArgument = 1,
    /// File system failure.
    Io = 2,
    /// Malformed file or input data.
    Format = 3,
    /// Invalid or incompatible configuration.
    Config = 4,
    /// Internal invariant violated or panic caught.
    Internal = 5,
}

/// Fusion rule of [`rn_model_predict`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RnFusion {
    MeanLogprob = 0,
    SegOnly = 1,
    ChangeOnly = 2,
}

/// Scores derived from a confusion matrix.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RnScore {
    pub f1_loc: f64,
    pub f1_damage: [f64; 4],
    pub f1_harmonic: f64,
    pub score: f64,
    pub n_pixels: u64,
}

/// Opaque 5x5 confusion matrix.
pub struct RnConfusion(ConfusionMatrix);

/// Opaque model loaded from a checkpoint.
pub struct RnModel(RescueNet);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RnStatus {
    match e {
        Error::Io { .. } => RnStatus::Io,
        Error::Config(_) | Error::IncompatibleCheckpoint { .. } => RnStatus::Config,
        Error::Internal(_) => RnStatus::Internal,
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::InvalidInput(_) => {
            RnStatus::InvalidArgument
        }
        _ => RnStatus::Format,
    }
}

/// Runs `f`, recording failures and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (RnStatus, String)>) -> RnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RnStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside rescuenet");
            RnStatus::Internal
        }
    }
}

fn fail(e: Error) -> (RnStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (RnStatus, String) {
    (RnStatus::InvalidArgument, msg.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (RnStatus, String)> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn slice_arg<'a, T>(
    p: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (RnStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer to write a handle to.
#[no_mangle]
pub unsafe extern "C" fn rn_confusion_new(out: *mut *mut RnConfusion) -> RnStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = Box::into_raw(Box::new(RnConfusion(ConfusionMatrix::new())));
        Ok(())
    })
}

/// Adds `len` aligned label pairs. Pixels whose ground truth is 255 are
/// ignored.
///
/// # Safety
/// `cm` must come from [`rn_confusion_new`]; `gt` and `pred` must point to
/// `len` bytes each.
#[no_mangle]
pub unsafe extern "C" fn rn_confusion_accumulate(
    cm: *mut RnConfusion,
    gt: *const u8,
    pred: *const u8,
    len: usize,
) -> RnStatus {
    guard(|| {
        let cm = cm
            .as_mut()
            .ok_or_else(|| invalid("confusion handle is null"))?;
        let gt = slice_arg(gt, len, "gt")?;
        let pred = slice_arg(pred, len, "pred")?;
        cm.0.accumulate(gt, pred, None).map_err(fail)
    })
}

/// Adds the counts of `src` to `dst`.
///
/// # Safety
/// Both handles must come from [`rn_confusion_new`].
#[no_mangle]
pub unsafe extern "C" fn rn_confusion_merge(
    dst: *mut RnConfusion,
    src: *const RnConfusion,
) -> RnStatus {
    guard(|| {
        let src = src
            .as_ref()
            .ok_or_else(|| invalid("src is null"))?
            .0;
        let dst = dst.as_mut().ok_or_else(|| invalid("dst is null"))?;
        dst.0.merge(&src);
        Ok(())
    })
}

fn to_score(r: &EvalReport) -> RnScore {
    RnScore {
        f1_loc: r.f1_loc,
        f1_damage: r.f1_per_class,
        f1_harmonic: r.harmonic_mean,
        score: r.overall,
        n_pixels: r.n_pixels,
    }
}

/// # Safety
/// `cm` must come from [`rn_confusion_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rn_confusion_score(cm: *const RnConfusion, out: *mut RnScore) -> RnStatus {
    guard(|| {
        let cm = cm
            .as_ref()
            .ok_or_else(|| invalid("confusion handle is null"))?;
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        *out = to_score(&cm.0.report());
        Ok(())
    })
}

/// # Safety
/// `cm` must come from [`rn_confusion_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn rn_confusion_free(cm: *mut RnConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Loads a model from a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rn_model_load(path: *const c_char, out: *mut *mut RnModel) -> RnStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let ckpt = load_checkpoint(&path).map_err(fail)?;
        let net = RescueNet::from_params(ckpt.model_config, ckpt.params).map_err(fail)?;
        *out = Box::into_raw(Box::new(RnModel(net)));
        Ok(())
    })
}

/// Predicts label masks for `n` image pairs given as `n x 3 x h x w` floats
/// in `[0, 1]`, writing `n * h * w` class values to `out_masks`.
///
/// # Safety
/// `model` must come from [`rn_model_load`]; `pre` and `post` must point to
/// `n * 3 * h * w` floats and `out_masks` to `n * h * w` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rn_model_predict(
    model: *const RnModel,
    pre: *const f32,
    post: *const f32,
    n: usize,
    h: usize,
    w: usize,
    fusion: RnFusion,
    out_masks: *mut u8,
) -> RnStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| invalid("model handle is null"))?;
        let len = n
            .checked_mul(3)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| invalid("image size overflows"))?;
        if len == 0 {
            return Err(invalid("empty input"));
        }
        if out_masks.is_null() {
            return Err(invalid("out_masks is null"));
        }
        let shape = [n, 3, h, w];
        let pre = Tensor::new(shape, slice_arg(pre, len, "pre")?.to_vec()).map_err(fail)?;
        let post = Tensor::new(shape, slice_arg(post, len, "post")?.to_vec()).map_err(fail)?;
        let fusion = match fusion {
            RnFusion::MeanLogprob => Fusion::MeanLogprob,
            RnFusion::SegOnly => Fusion::SegOnly,
            RnFusion::ChangeOnly => Fusion::ChangeOnly,
        };
        let masks = model.0.predict(&pre, &post, fusion).map_err(fail)?;
        let out = std::slice::from_raw_parts_mut(out_masks, n * h * w);
        for (dst, m) in out.chunks_exact_mut(h * w).zip(&masks) {
            dst.copy_from_slice(m.data());
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rn_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn rn_model_free(model: *mut RnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `count` synthetic scene pairs of `image_size` pixels to `dir`
/// with the default generator settings.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rn_generate_dataset(
    dir: *const c_char,
    count: usize,
    seed: u64,
    image_size: usize,
) -> RnStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let config = GeneratorConfig {
            image_size,
            ..GeneratorConfig::default()
        };
        config.validate().map_err(fail)?;
        let pairs = generate_dataset(&config, count, seed).map_err(fail)?;
        save_dataset(&pairs, &dir).map_err(fail)?;
        Ok(())
    })
}
