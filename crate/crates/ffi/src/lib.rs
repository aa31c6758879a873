//! C ABI for mintflow.
//!
//! Models are opaque handles created from checkpoint directories; every
//! fallible call returns an [`MfStatus`] and leaves a human-readable message
//! retrievable with [`mf_last_error`]. Buffers are caller-allocated flat
//! `f64` arrays in the crate's row-major `(n, c, h, w)` layout. The companion
//! header `include/mintflow.h` is generated by cbindgen at build time.

use mintflow::flow::{self, FlowModel};
use mintflow::solver::SolverConfig;
use mintflow::tensor::Tensor4;
use mintflow::train;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad argument values (shapes, counts, solver settings).
    InvalidArgument = 3,
    /// Filesystem or checkpoint-format failure.
    Io = 4,
    /// The fixed-point inversion diverged.
    Diverged = 5,
    /// Unexpected internal failure; see `mf_last_error`.
    Internal = 6,
}

/// Opaque handle to a loaded flow model.
pub struct MfModel {
    model: FlowModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &mintflow::Error) -> MfStatus {
    use mintflow::Error as E;
    match err {
        E::InvalidArg(_) | E::Config(_) | E::ShapeMismatch { .. } => MfStatus::InvalidArgument,
        E::Io(_)
        | E::IdxBadMagic { .. }
        | E::IdxTruncated { .. }
        | E::IdxDimMismatch { .. }
        | E::CheckpointVersion { .. }
        | E::CheckpointMissingTensor { .. }
        | E::CheckpointShape { .. } => MfStatus::Io,
        E::Divergence { .. } | E::BracketFailed { .. } | E::NonFinite { .. } => MfStatus::Diverged,
        _ => MfStatus::Internal,
    }
}

fn fail(err: mintflow::Error) -> MfStatus {
    set_last_error(&err.to_string());
    status_of(&err)
}

fn guarded(f: impl FnOnce() -> MfStatus) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            MfStatus::Internal
        }
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Static version string of the library.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint directory into a model handle.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to a writable
/// `MfModel*` slot. On success `*out` owns the model and must be released
/// with [`mf_model_free`].
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            set_last_error("null pointer argument");
            return MfStatus::NullPointer;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_last_error("path is not valid UTF-8");
                return MfStatus::InvalidUtf8;
            }
        };
        match train::load_checkpoint(Path::new(path)) {
            Ok((model, _, _)) => {
                unsafe { *out = Box::into_raw(Box::new(MfModel { model })) };
                MfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a model handle. Null is a no-op; the handle must not be used
/// afterwards.
///
/// # Safety
/// `model` must be null or a pointer previously returned by
/// [`mf_model_load`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Model input shape (channels, height, width).
///
/// # Safety
/// `model` must be a live handle; the three out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_input_shape(
    model: *const MfModel,
    c: *mut usize,
    h: *mut usize,
    w: *mut usize,
) -> MfStatus {
    if model.is_null() || c.is_null() || h.is_null() || w.is_null() {
        set_last_error("null pointer argument");
        return MfStatus::NullPointer;
    }
    let (mc, mh, mw) = unsafe { &*model }.model.input_shape();
    unsafe {
        *c = mc;
        *h = mh;
        *w = mw;
    }
    MfStatus::Ok
}

/// Coordinates per image (`c*h*w`), the stride of all flat buffers.
///
/// # Safety
/// `model` must be a live handle and `dims` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_dims(model: *const MfModel, dims: *mut usize) -> MfStatus {
    if model.is_null() || dims.is_null() {
        set_last_error("null pointer argument");
        return MfStatus::NullPointer;
    }
    unsafe { *dims = (*model).model.dims() };
    MfStatus::Ok
}

unsafe fn tensor_from(model: &FlowModel, data: *const f64, n: usize) -> Option<Tensor4> {
    let (c, h, w) = model.input_shape();
    let slice = unsafe { std::slice::from_raw_parts(data, n * c * h * w) };
    Tensor4::new(n, c, h, w, slice.to_vec()).ok()
}

/// Exact log-likelihood of `n` preprocessed (logit-space) images laid out as
/// `n * dims` values; writes `n` values to `out`.
///
/// # Safety
/// `x` must hold `n * dims` readable values and `out` `n` writable slots.
#[no_mangle]
pub unsafe extern "C" fn mf_log_prob(
    model: *const MfModel,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> MfStatus {
    guarded(|| {
        if model.is_null() || x.is_null() || out.is_null() {
            set_last_error("null pointer argument");
            return MfStatus::NullPointer;
        }
        let model = &unsafe { &*model }.model;
        let Some(batch) = (unsafe { tensor_from(model, x, n) }) else {
            set_last_error("batch does not match the model input shape");
            return MfStatus::InvalidArgument;
        };
        match flow::log_prob(model, &batch) {
            Ok(lp) => {
                unsafe { std::slice::from_raw_parts_mut(out, n) }.copy_from_slice(&lp);
                MfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Bits per dimension of `n` raw images (pixel values 0..=255) with seeded
/// uniform dequantization; writes one value to `out`.
///
/// # Safety
/// `pixels` must hold `n * dims` readable values and `out` one writable slot.
#[no_mangle]
pub unsafe extern "C" fn mf_bpd(
    model: *const MfModel,
    pixels: *const f64,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> MfStatus {
    guarded(|| {
        if model.is_null() || pixels.is_null() || out.is_null() {
            set_last_error("null pointer argument");
            return MfStatus::NullPointer;
        }
        let model = &unsafe { &*model }.model;
        let Some(batch) = (unsafe { tensor_from(model, pixels, n) }) else {
            set_last_error("batch does not match the model input shape");
            return MfStatus::InvalidArgument;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match flow::bpd(model, &batch, &mut rng) {
            Ok(v) => {
                unsafe { *out = v };
                MfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Draw `n` samples by fixed-point inversion and write dequantized pixel
/// values (clamped to `[0, 255]`) as `n * dims` values. `alpha <= 0` selects
/// the default step size 1.0; `max_iters == 0` selects 120. Optionally
/// reports the clipped fraction.
///
/// # Safety
/// `out_pixels` must hold `n * dims` writable slots; `out_clipped_fraction`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn mf_sample(
    model: *const MfModel,
    n: usize,
    seed: u64,
    alpha: f64,
    max_iters: usize,
    out_pixels: *mut f64,
    out_clipped_fraction: *mut f64,
) -> MfStatus {
    guarded(|| {
        if model.is_null() || out_pixels.is_null() {
            set_last_error("null pointer argument");
            return MfStatus::NullPointer;
        }
        let model = &unsafe { &*model }.model;
        let cfg = SolverConfig {
            alpha: if alpha > 0.0 { alpha } else { 1.0 },
            max_iters: if max_iters > 0 { max_iters } else { 120 },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match flow::sample(model, n, &cfg, &mut rng) {
            Ok(s) => {
                let len = s.pixels.len();
                unsafe { std::slice::from_raw_parts_mut(out_pixels, len) }
                    .copy_from_slice(s.pixels.data());
                if !out_clipped_fraction.is_null() {
                    unsafe { *out_clipped_fraction = s.clipped_fraction };
                }
                MfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(mf_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut out: *mut MfModel = std::ptr::null_mut();
        assert_eq!(
            unsafe { mf_model_load(std::ptr::null(), &mut out) },
            MfStatus::NullPointer
        );
        assert_eq!(
            unsafe { mf_model_dims(std::ptr::null(), std::ptr::null_mut()) },
            MfStatus::NullPointer
        );
        unsafe { mf_model_free(std::ptr::null_mut()) };
    }

    #[test]
    fn missing_checkpoint_reports_io() {
        let path = CString::new("/definitely/not/here").unwrap();
        let mut out: *mut MfModel = std::ptr::null_mut();
        let status = unsafe { mf_model_load(path.as_ptr(), &mut out) };
        assert_eq!(status, MfStatus::Io);
        let msg = unsafe { CStr::from_ptr(mf_last_error()) }.to_string_lossy();
        assert!(!msg.is_empty());
    }
}
