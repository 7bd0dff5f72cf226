//! C ABI over the `msunet` crate.
//!
//! Models are opaque handles created by [`msunet_model_load`] and released
//! with [`msunet_model_free`]. Every fallible function returns an
//! [`MsunetStatus`]; on failure a description is available from
//! [`msunet_last_error`] on the same thread until the next failing call.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use msunet::architecture::CascadeModel;
use msunet::data::load_checkpoint;
use msunet::loss::jaccard_distance_loss;
use msunet::metrics::{compute_metrics, confusion};
use msunet::training::{predict, TrainConfig};
use msunet::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsunetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed checkpoint or image file.
    Format = 4,
    /// Buffer sizes do not match the model.
    Shape = 5,
    NonFinite = 6,
    /// A Rust panic was caught; the handle should not be used further.
    Internal = 7,
}

/// A loaded cascade and the configuration it was trained with.
pub struct MsunetModel {
    model: CascadeModel<f32>,
    config: TrainConfig,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MsunetModelInfo {
    pub stages: u32,
    pub input_width: u32,
    pub input_height: u32,
    pub threshold: f32,
    pub param_count: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MsunetMetrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub ja: f64,
    pub di: f64,
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MsunetStatus {
    match e {
        Error::Io { .. } => MsunetStatus::Io,
        Error::Checkpoint { .. } | Error::Image { .. } | Error::Json(_) => MsunetStatus::Format,
        Error::Shape(_) => MsunetStatus::Shape,
        Error::NonFinite(_) => MsunetStatus::NonFinite,
        _ => MsunetStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (MsunetStatus, String)>) -> MsunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsunetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsunetStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (MsunetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MsunetStatus, String) {
    (MsunetStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn msunet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn msunet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msunet_model_load(path: *const c_char, out: *mut *mut MsunetModel) -> MsunetStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MsunetStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (model, config) = load_checkpoint(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MsunetModel { model, config }));
        Ok(())
    })
}

/// Releases a handle from [`msunet_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msunet_model_free(model: *mut MsunetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msunet_model_info(model: *const MsunetModel, out: *mut MsunetModelInfo) -> MsunetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = MsunetModelInfo {
            stages: m.config.stages as u32,
            input_width: m.config.input_size.width as u32,
            input_height: m.config.input_size.height as u32,
            threshold: m.config.threshold as f32,
            param_count: m.model.param_count() as u64,
        };
        Ok(())
    })
}

/// Segments one image at the model's input size.
///
/// `rgb` holds `3 * height * width` planar floats in `[0, 1]` (all red, then
/// green, then blue, rows top to bottom). `stage_maps`, if not null,
/// receives `stages * height * width` probabilities; `mask`, if not null,
/// receives `height * width` bytes, 1 for lesion and 0 otherwise.
///
/// # Safety
/// All non-null pointers must reference buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn msunet_model_predict(
    model: *const MsunetModel,
    rgb: *const f32,
    width: u32,
    height: u32,
    stage_maps: *mut f32,
    mask: *mut u8,
) -> MsunetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let (w, h) = (width as usize, height as usize);
        if (w, h) != (m.config.input_size.width, m.config.input_size.height) {
            return Err((
                MsunetStatus::Shape,
                format!("image is {w}x{h}, the model expects {}", m.config.input_size),
            ));
        }
        let pixels = slice::from_raw_parts(rgb, 3 * w * h).to_vec();
        let image = Tensor::from_vec([1, 3, h, w], pixels).map_err(lib_err)?;
        if !image.all_finite() {
            return Err((MsunetStatus::NonFinite, "image contains NaN or Inf".into()));
        }
        let pred = predict(&m.model, &m.config, &image).map_err(lib_err)?;
        if !stage_maps.is_null() {
            let out = slice::from_raw_parts_mut(stage_maps, pred.stage_maps.len() * w * h);
            for (chunk, map) in out.chunks_exact_mut(w * h).zip(&pred.stage_maps) {
                chunk.copy_from_slice(map.data());
            }
        }
        if !mask.is_null() {
            let out = slice::from_raw_parts_mut(mask, w * h);
            for (o, &v) in out.iter_mut().zip(pred.mask.data()) {
                *o = v as u8;
            }
        }
        Ok(())
    })
}

/// Soft Jaccard distance between a 0/1 target and probabilities.
///
/// # Safety
/// `target` and `prob` must hold `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msunet_jaccard_distance(
    target: *const f32,
    prob: *const f32,
    len: usize,
    out: *mut f64,
) -> MsunetStatus {
    guard(|| {
        if target.is_null() || prob.is_null() {
            return Err(null("input buffer"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let row = |p: *const f32| Tensor::from_vec([1, 1, 1, len], slice::from_raw_parts(p, len).to_vec());
        let t = row(target).map_err(lib_err)?;
        let p = row(prob).map_err(lib_err)?;
        *out = jaccard_distance_loss(&t, &p).map_err(lib_err)?;
        Ok(())
    })
}

/// Confusion counts and the five metrics of a binary prediction. Inputs are
/// `len` bytes each, 0 or 1.
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msunet_metrics(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    out: *mut MsunetMetrics,
) -> MsunetStatus {
    guard(|| {
        if pred.is_null() || truth.is_null() {
            return Err(null("input buffer"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let row = |p: *const u8| {
            let data = slice::from_raw_parts(p, len).iter().map(|&b| b as f32).collect();
            Tensor::<f32>::from_vec([1, 1, 1, len], data)
        };
        let counts = confusion(&row(pred).map_err(lib_err)?, &row(truth).map_err(lib_err)?).map_err(lib_err)?;
        let m = compute_metrics(&counts);
        *out = MsunetMetrics {
            tp: counts.tp,
            fp: counts.fp,
            tn: counts.tn,
            fn_: counts.fn_,
            ja: m.ja,
            di: m.di,
            se: m.se,
            sp: m.sp,
            ac: m.ac,
        };
        Ok(())
    })
}
