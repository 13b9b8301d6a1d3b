//! C ABI for the attribution library: load a checkpoint, run inference,
//! compute attribution maps for real/counterfactual pairs, and score them
//! with the mask-sweep evaluation.
//!
//! Conventions:
//! * every fallible call returns a [`DacStatus`]; `DAC_STATUS_OK` is 0
//! * results are written through caller-provided out pointers/buffers
//! * on failure, [`dac_last_error`] returns a thread-local message that
//!   stays valid until the next failing call on the same thread
//! * [`DacModel`] is opaque; release it with [`dac_model_free`]
//!
//! Images cross the boundary as flat row-major `double` buffers of length
//! `input_size * input_size`, one channel, values typically in [0, 1].
//! The generated header lives at `include/dac.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use dac_core::attrib::{attribute, AttributionConfig, AttributionMap, MethodId};
use dac_core::data::PairRecord;
use dac_core::eval::evaluate_pair;
use dac_core::grad::Tensor;
use dac_core::model::{checkpoint, infer, Checkpoint};

/// Result code returned by every fallible `dac_*` call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DacStatus {
    /// The call succeeded and all outputs were written.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation (bad length, unknown method, class
    /// out of range, …); see `dac_last_error`.
    InvalidArgument = 2,
    /// The checkpoint could not be read or failed structural validation.
    LoadFailed = 3,
    /// Inference, attribution, or evaluation failed on valid-looking
    /// arguments (e.g. uninitialized batch-norm statistics).
    ComputeFailed = 4,
    /// An internal invariant was violated; the library caught a panic at
    /// the boundary instead of unwinding into the caller.
    InternalPanic = 5,
}

/// Opaque handle to a loaded model checkpoint.
pub struct DacModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

/// Record `msg` for `dac_last_error` and pass `status` through.
fn fail(status: DacStatus, msg: impl std::fmt::Display) -> DacStatus {
    // Interior NULs would truncate the C string; map them to spaces.
    let bytes: Vec<u8> =
        msg.to_string().into_bytes().iter().map(|&b| if b == 0 { b' ' } else { b }).collect();
    let cstring = CString::new(bytes).expect("NUL bytes were just replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = cstring);
    status
}

/// Run `f`, converting any panic into `InternalPanic` so the unwind never
/// crosses the C boundary.
fn guarded<F: FnOnce() -> DacStatus>(f: F) -> DacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            fail(DacStatus::InternalPanic, format_args!("internal panic: {msg}"))
        }
    }
}

/// Library version as a static NUL-terminated string; never null.
#[no_mangle]
pub extern "C" fn dac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on the calling thread, or an
/// empty string if none. The pointer is invalidated by the next failing
/// `dac_*` call on this thread; copy the string if it must outlive that.
#[no_mangle]
pub extern "C" fn dac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint from `path` (NUL-terminated UTF-8) and store the new
/// handle in `*out`. On failure `*out` is left untouched. The handle must
/// be released with `dac_model_free`.
#[no_mangle]
pub unsafe extern "C" fn dac_model_load(path: *const c_char, out: *mut *mut DacModel) -> DacStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(DacStatus::NullArgument, "dac_model_load: null argument");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                return fail(DacStatus::InvalidArgument, "dac_model_load: path is not valid UTF-8")
            }
        };
        match checkpoint::load(Path::new(path)) {
            Ok(ckpt) => {
                unsafe { *out = Box::into_raw(Box::new(DacModel { ckpt })) };
                DacStatus::Ok
            }
            Err(e) => fail(DacStatus::LoadFailed, format_args!("dac_model_load: {e}")),
        }
    })
}

/// Release a handle returned by `dac_model_load`. Null is a no-op. The
/// handle must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dac_model_free(model: *mut DacModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Side length of the square input the model expects; 0 if `model` is null.
#[no_mangle]
pub unsafe extern "C" fn dac_model_input_size(model: *const DacModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.ckpt.spec.input_size
}

/// Number of output classes; 0 if `model` is null.
#[no_mangle]
pub unsafe extern "C" fn dac_model_num_classes(model: *const DacModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.ckpt.spec.num_classes
}

/// Checked view of a caller buffer: null and length validation in one place.
unsafe fn image_slice<'a>(
    ptr: *const f64,
    len: usize,
    expect: usize,
    what: &str,
) -> Result<&'a [f64], DacStatus> {
    if ptr.is_null() {
        return Err(fail(DacStatus::NullArgument, format_args!("{what}: null pixel buffer")));
    }
    if len != expect {
        return Err(fail(
            DacStatus::InvalidArgument,
            format_args!("{what}: buffer holds {len} values, model expects {expect}"),
        ));
    }
    Ok(unsafe { slice::from_raw_parts(ptr, len) })
}

fn parse_method(method: *const c_char, what: &str) -> Result<MethodId, DacStatus> {
    if method.is_null() {
        return Err(fail(DacStatus::NullArgument, format_args!("{what}: null method")));
    }
    let name = match unsafe { CStr::from_ptr(method) }.to_str() {
        Ok(s) => s,
        Err(_) => {
            return Err(fail(
                DacStatus::InvalidArgument,
                format_args!("{what}: method is not valid UTF-8"),
            ))
        }
    };
    name.parse::<MethodId>()
        .map_err(|e| fail(DacStatus::InvalidArgument, format_args!("{what}: {e}")))
}

fn check_class(class: usize, num_classes: usize, what: &str) -> Result<(), DacStatus> {
    if class >= num_classes {
        return Err(fail(
            DacStatus::InvalidArgument,
            format_args!("{what}: class {class} out of range for {num_classes} classes"),
        ));
    }
    Ok(())
}

/// Run the model on one image of `input_size * input_size` pixels and write
/// the class probabilities (softmax, summing to 1) into `probs_out`, whose
/// length must equal the number of classes.
#[no_mangle]
pub unsafe extern "C" fn dac_model_predict(
    model: *const DacModel,
    pixels: *const f64,
    pixels_len: usize,
    probs_out: *mut f64,
    probs_len: usize,
) -> DacStatus {
    guarded(|| {
        if model.is_null() || probs_out.is_null() {
            return fail(DacStatus::NullArgument, "dac_model_predict: null argument");
        }
        let ckpt = &unsafe { &*model }.ckpt;
        let s = ckpt.spec.input_size;
        let pixels = match unsafe { image_slice(pixels, pixels_len, s * s, "dac_model_predict") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let k = ckpt.spec.num_classes;
        if probs_len != k {
            return fail(
                DacStatus::InvalidArgument,
                format_args!("dac_model_predict: probs buffer holds {probs_len}, model has {k} classes"),
            );
        }
        let batch = Tensor::new(vec![1, 1, s, s], pixels.to_vec());
        match infer(ckpt, &batch) {
            Ok((probs, _logits)) => {
                unsafe { slice::from_raw_parts_mut(probs_out, k) }.copy_from_slice(probs.data());
                DacStatus::Ok
            }
            Err(e) => fail(DacStatus::ComputeFailed, format_args!("dac_model_predict: {e}")),
        }
    })
}

/// Compute one attribution map for a real/counterfactual image pair and
/// write it (row-major, possibly signed) into `map_out`.
///
/// `method` is one of `ingrads`, `d-ingrads`, `ig`, `d-ig`, `dl`, `d-dl`,
/// `gc`, `d-gc`, `ggc`, `d-ggc`, `residual`, `random`. Standard methods
/// explain `real` at `class_real`; discriminative ones contrast against
/// `counterfactual` at `class_counterfactual`. `ig_steps` is consumed only
/// by `ig`/`d-ig` (and must be ≥ 1 there); `random_seed` only by `random`.
/// Both image buffers and `map_out` must hold `input_size * input_size`
/// values.
#[no_mangle]
pub unsafe extern "C" fn dac_attribute(
    model: *const DacModel,
    method: *const c_char,
    real: *const f64,
    counterfactual: *const f64,
    pixels_len: usize,
    class_real: usize,
    class_counterfactual: usize,
    ig_steps: usize,
    random_seed: u64,
    map_out: *mut f64,
    map_len: usize,
) -> DacStatus {
    guarded(|| {
        if model.is_null() || map_out.is_null() {
            return fail(DacStatus::NullArgument, "dac_attribute: null argument");
        }
        let method = match parse_method(method, "dac_attribute") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let ckpt = &unsafe { &*model }.ckpt;
        let s = ckpt.spec.input_size;
        let (x_o, x_c) = unsafe {
            let real = match image_slice(real, pixels_len, s * s, "dac_attribute") {
                Ok(p) => p,
                Err(status) => return status,
            };
            let cf = match image_slice(counterfactual, pixels_len, s * s, "dac_attribute") {
                Ok(p) => p,
                Err(status) => return status,
            };
            (real, cf)
        };
        let k = ckpt.spec.num_classes;
        if let Err(status) = check_class(class_real, k, "dac_attribute")
            .and_then(|()| check_class(class_counterfactual, k, "dac_attribute"))
        {
            return status;
        }
        if matches!(method, MethodId::Ig | MethodId::DIg) && ig_steps == 0 {
            return fail(DacStatus::InvalidArgument, "dac_attribute: ig_steps must be >= 1");
        }
        if map_len != s * s {
            return fail(
                DacStatus::InvalidArgument,
                format_args!("dac_attribute: map buffer holds {map_len} values, need {}", s * s),
            );
        }
        let x_o = Tensor::new(vec![1, s, s], x_o.to_vec());
        let x_c = Tensor::new(vec![1, s, s], x_c.to_vec());
        let cfg = AttributionConfig { ig_steps, random_seed };
        match attribute(ckpt, method, &x_o, &x_c, class_real, class_counterfactual, &cfg) {
            Ok(map) => {
                unsafe { slice::from_raw_parts_mut(map_out, map_len) }
                    .copy_from_slice(map.data.data());
                DacStatus::Ok
            }
            Err(e) => fail(DacStatus::ComputeFailed, format_args!("dac_attribute: {e}")),
        }
    })
}

/// Score one real/counterfactual pair under an attribution map: sweep mask
/// thresholds over the map's magnitudes, build hybrids, and integrate the
/// class-probability gain. Writes the curve area to `auc_out` and the
/// minimal sufficient mask's pixel fraction / objective value to
/// `min_fraction_out` / `min_score_out`.
///
/// `map` may come from `dac_attribute` or elsewhere; signed values are
/// reduced to magnitudes. `method` labels the map and must name a known
/// method. `n_thresholds` must be ≥ 2. All three out pointers are required.
#[no_mangle]
pub unsafe extern "C" fn dac_evaluate_pair(
    model: *const DacModel,
    method: *const c_char,
    real: *const f64,
    counterfactual: *const f64,
    pixels_len: usize,
    class_real: usize,
    class_counterfactual: usize,
    map: *const f64,
    map_len: usize,
    n_thresholds: usize,
    auc_out: *mut f64,
    min_fraction_out: *mut f64,
    min_score_out: *mut f64,
) -> DacStatus {
    guarded(|| {
        if model.is_null() || auc_out.is_null() || min_fraction_out.is_null() || min_score_out.is_null()
        {
            return fail(DacStatus::NullArgument, "dac_evaluate_pair: null argument");
        }
        let method = match parse_method(method, "dac_evaluate_pair") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let ckpt = &unsafe { &*model }.ckpt;
        let s = ckpt.spec.input_size;
        let (x_o, x_c, map) = unsafe {
            let real = match image_slice(real, pixels_len, s * s, "dac_evaluate_pair") {
                Ok(p) => p,
                Err(status) => return status,
            };
            let cf = match image_slice(counterfactual, pixels_len, s * s, "dac_evaluate_pair") {
                Ok(p) => p,
                Err(status) => return status,
            };
            let map = match image_slice(map, map_len, s * s, "dac_evaluate_pair") {
                Ok(p) => p,
                Err(status) => return status,
            };
            (real, cf, map)
        };
        let k = ckpt.spec.num_classes;
        if let Err(status) = check_class(class_real, k, "dac_evaluate_pair")
            .and_then(|()| check_class(class_counterfactual, k, "dac_evaluate_pair"))
        {
            return status;
        }
        if n_thresholds < 2 {
            return fail(DacStatus::InvalidArgument, "dac_evaluate_pair: n_thresholds must be >= 2");
        }
        if !map.iter().all(|v| v.is_finite()) {
            return fail(DacStatus::InvalidArgument, "dac_evaluate_pair: map has non-finite values");
        }
        let x_o = Tensor::new(vec![1, s, s], x_o.to_vec());
        let x_c = Tensor::new(vec![1, s, s], x_c.to_vec());
        // Raw buffers carry no sign metadata; treating every map as signed
        // thresholds on |v|, which is the identity for nonnegative maps.
        let map = AttributionMap {
            method,
            target_class: None,
            data: Tensor::new(vec![s, s], map.to_vec()),
            signed: true,
        };
        let mut rec = PairRecord::new("ffi", class_real, class_counterfactual, "", "");
        rec.accepted = true;
        match evaluate_pair(ckpt, &rec, &x_o, &x_c, &map, n_thresholds) {
            Ok(result) => {
                unsafe {
                    *auc_out = result.auc;
                    *min_fraction_out = result.min_fraction;
                    *min_score_out = result.min_score;
                }
                DacStatus::Ok
            }
            Err(e) => fail(DacStatus::ComputeFailed, format_args!("dac_evaluate_pair: {e}")),
        }
    })
}
