//! C ABI over `wdfq-core`.
//!
//! Every function returns a status: `WDFQ_OK` on success, one of the
//! `WDFQ_E_*` codes otherwise. After a failure, `wdfq_last_error` gives a
//! message for the calling thread. Handles are opaque and owned by the caller
//! until passed to the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use wdfq::pipeline::image::load_pair;
use wdfq::pipeline::{Model, PipelineConfig};
use wdfq::wavelet::dwt_haar;
use wdfq::{Error, Tensor};

pub const WDFQ_OK: i32 = 0;
/// A required pointer argument was null.
pub const WDFQ_E_NULL: i32 = 1;
/// A string argument was not valid UTF-8.
pub const WDFQ_E_UTF8: i32 = 2;
/// The output buffer is too small; the required count is still written.
pub const WDFQ_E_CAPACITY: i32 = 3;
/// An internal panic was caught at the boundary.
pub const WDFQ_E_PANIC: i32 = 4;
pub const WDFQ_E_DIMENSION: i32 = 10;
pub const WDFQ_E_SHAPE: i32 = 11;
pub const WDFQ_E_CONFIG: i32 = 12;
pub const WDFQ_E_UNSUPPORTED_OP: i32 = 13;
pub const WDFQ_E_REGISTRY: i32 = 14;
pub const WDFQ_E_ARGUMENT: i32 = 15;
pub const WDFQ_E_INFEASIBLE: i32 = 16;
pub const WDFQ_E_STATISTICS: i32 = 17;
pub const WDFQ_E_NUMERIC: i32 = 18;
pub const WDFQ_E_IMAGE_HEADER: i32 = 20;
pub const WDFQ_E_PAIRING: i32 = 21;
pub const WDFQ_E_EXTENT: i32 = 22;
pub const WDFQ_E_TENSOR_FORMAT: i32 = 23;
pub const WDFQ_E_DATASET: i32 = 24;
pub const WDFQ_E_DIVERGENCE: i32 = 30;
pub const WDFQ_E_IO: i32 = 40;

/// Opaque pipeline instance.
pub struct WdfqModel(Model);

/// Opaque dense `f64` tensor.
pub struct WdfqTensor(Tensor);

/// One detection with normalized center-size box.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WdfqDetection {
    pub cls: u32,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.status(), format!("error[{}]: {e}", e.code()))
    }
}

fn null(name: &str) -> Failure {
    Failure(WDFQ_E_NULL, format!("`{name}` is null"))
}

/// Runs `f`, records any failure and converts it into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WDFQ_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            WDFQ_E_PANIC
        }
    }
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(WDFQ_E_UTF8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn reference<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wdfq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model from configuration text (`key = value` lines).
///
/// # Safety
/// `config` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wdfq_model_from_text(
    config: *const c_char,
    out: *mut *mut WdfqModel,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = PipelineConfig::parse(string(config, "config")?)?;
        store(out, WdfqModel(Model::new(cfg)?));
        Ok(())
    })
}

/// Builds a model from a configuration file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wdfq_model_load(path: *const c_char, out: *mut *mut WdfqModel) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = PipelineConfig::load(&PathBuf::from(string(path, "path")?))?;
        store(out, WdfqModel(Model::new(cfg)?));
        Ok(())
    })
}

/// # Safety
/// `model` must come from a `wdfq_model_*` constructor and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn wdfq_model_free(model: *mut WdfqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies `data` into a new tensor of the given shape.
///
/// # Safety
/// `shape` must hold `rank` values and `data` their product.
#[no_mangle]
pub unsafe extern "C" fn wdfq_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut WdfqTensor,
) -> i32 {
    guard(|| {
        if shape.is_null() {
            return Err(null("shape"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = std::slice::from_raw_parts(shape, rank).to_vec();
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Failure(WDFQ_E_SHAPE, "shape overflows".into()))?;
        let data = std::slice::from_raw_parts(data, numel).to_vec();
        store(out, WdfqTensor(Tensor::new(shape, data)?));
        Ok(())
    })
}

/// Reads a tensor file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wdfq_tensor_load(path: *const c_char, out: *mut *mut WdfqTensor) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = Tensor::load(&PathBuf::from(string(path, "path")?))?;
        store(out, WdfqTensor(t));
        Ok(())
    })
}

/// # Safety
/// `tensor` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wdfq_tensor_rank(tensor: *const WdfqTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.shape().len())
}

/// Writes up to `capacity` extents into `shape`.
///
/// # Safety
/// `tensor` must be a live handle and `shape` hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn wdfq_tensor_shape(
    tensor: *const WdfqTensor,
    shape: *mut usize,
    capacity: usize,
) -> i32 {
    guard(|| {
        let t = reference(tensor, "tensor")?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let dims = t.0.shape();
        if dims.len() > capacity {
            return Err(Failure(
                WDFQ_E_CAPACITY,
                format!("rank {} exceeds capacity {capacity}", dims.len()),
            ));
        }
        ptr::copy_nonoverlapping(dims.as_ptr(), shape, dims.len());
        Ok(())
    })
}

/// # Safety
/// `tensor` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wdfq_tensor_numel(tensor: *const WdfqTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.numel())
}

/// Row-major values, valid while the handle lives.
///
/// # Safety
/// `tensor` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wdfq_tensor_data(tensor: *const WdfqTensor) -> *const f64 {
    tensor.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `tensor` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn wdfq_tensor_free(tensor: *mut WdfqTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// One-level Haar transform of a `[N, C, H, W]` tensor into four new handles.
///
/// # Safety
/// `x` must be a live handle and the four outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wdfq_dwt(
    x: *const WdfqTensor,
    ll: *mut *mut WdfqTensor,
    lh: *mut *mut WdfqTensor,
    hl: *mut *mut WdfqTensor,
    hh: *mut *mut WdfqTensor,
) -> i32 {
    guard(|| {
        let x = reference(x, "x")?;
        if ll.is_null() || lh.is_null() || hl.is_null() || hh.is_null() {
            return Err(null("band output"));
        }
        let b = dwt_haar(&x.0)?;
        store(ll, WdfqTensor(b.ll));
        store(lh, WdfqTensor(b.lh));
        store(hl, WdfqTensor(b.hl));
        store(hh, WdfqTensor(b.hh));
        Ok(())
    })
}

/// Loads an RGB / IR image pair as two `[1, 3, H, W]` tensors.
///
/// # Safety
/// Paths must be nul-terminated strings and outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wdfq_load_pair(
    rgb_path: *const c_char,
    ir_path: *const c_char,
    rgb: *mut *mut WdfqTensor,
    ir: *mut *mut WdfqTensor,
) -> i32 {
    guard(|| {
        if rgb.is_null() || ir.is_null() {
            return Err(null("image output"));
        }
        let (r, i) = load_pair(
            &PathBuf::from(string(rgb_path, "rgb_path")?),
            &PathBuf::from(string(ir_path, "ir_path")?),
        )?;
        store(rgb, WdfqTensor(r));
        store(ir, WdfqTensor(i));
        Ok(())
    })
}

/// Runs detection. `count` receives the number of detections; at most
/// `capacity` are written to `out`, and `WDFQ_E_CAPACITY` signals truncation.
///
/// # Safety
/// Handles must be live, `out` must hold `capacity` entries (or be null when
/// `capacity` is 0) and `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wdfq_infer(
    model: *const WdfqModel,
    rgb: *const WdfqTensor,
    ir: *const WdfqTensor,
    out: *mut WdfqDetection,
    capacity: usize,
    count: *mut usize,
) -> i32 {
    guard(|| {
        let model = reference(model, "model")?;
        let rgb = reference(rgb, "rgb")?;
        let ir = reference(ir, "ir")?;
        if count.is_null() {
            return Err(null("count"));
        }
        if out.is_null() && capacity > 0 {
            return Err(null("out"));
        }
        let dets = model.0.infer(&rgb.0, &ir.0)?.detections;
        *count = dets.len();
        for (i, d) in dets.iter().take(capacity).enumerate() {
            *out.add(i) = WdfqDetection {
                cls: d.cls as u32,
                score: d.score,
                cx: d.cx,
                cy: d.cy,
                w: d.w,
                h: d.h,
            };
        }
        if dets.len() > capacity {
            return Err(Failure(
                WDFQ_E_CAPACITY,
                format!("{} detections exceed capacity {capacity}", dets.len()),
            ));
        }
        Ok(())
    })
}
