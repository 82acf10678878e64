//! C ABI over `pbr-core`: box geometry plus loading and running a trained detector.
//!
//! Every fallible function returns a [`PbrStatus`]; on failure a message is
//! available from [`pbr_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use pbr_core::boxgeom::{boundary_areas, decode_box, encode_sigma, iou, shrink_factor, BBox, Sigma};
use pbr_core::detector::{infer, Detection, Detector};
use pbr_core::synthdata::RgbImage;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Runtime = 5,
    Panic = 6,
}

/// Axis-aligned box in pixels, `x1 <= x2`, `y1 <= y2`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PbrBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// A trained detector.
pub struct PbrDetector {
    inner: Detector,
}

/// Detections of one image, each with one box per stage.
pub struct PbrDetections {
    inner: Vec<Detection>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: PbrStatus, msg: impl Into<String>) -> PbrStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into [`PbrStatus::Panic`].
fn guard(f: impl FnOnce() -> PbrStatus) -> PbrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            fail(PbrStatus::Panic, format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())))
        }
    }
}

fn to_bbox(b: &PbrBox) -> Result<BBox, PbrStatus> {
    BBox::new(b.x1, b.y1, b.x2, b.y2).map_err(|e| fail(PbrStatus::InvalidArgument, e.to_string()))
}

fn from_bbox(b: &BBox) -> PbrBox {
    PbrBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(PbrStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pbr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn pbr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Intersection over union of two boxes.
#[no_mangle]
pub unsafe extern "C" fn pbr_iou(a: *const PbrBox, b: *const PbrBox, out: *mut f64) -> PbrStatus {
    non_null!(a, b, out);
    guard(|| {
        let a = try_status!(to_bbox(&*a));
        let b = try_status!(to_bbox(&*b));
        *out = iou(&a, &b);
        PbrStatus::Ok
    })
}

/// Boundary-area shrink factor `1/2^t` of refinement stage `t >= 1`.
#[no_mangle]
pub unsafe extern "C" fn pbr_shrink_factor(t: usize, out: *mut f64) -> PbrStatus {
    non_null!(out);
    guard(|| {
        *out = try_status!(shrink_factor(t).map_err(|e| fail(PbrStatus::InvalidArgument, e.to_string())));
        PbrStatus::Ok
    })
}

/// Side displacements `(l, r, u, b)` of `target` relative to the boundary areas of `bbox`.
#[no_mangle]
pub unsafe extern "C" fn pbr_encode_sigma(
    bbox: *const PbrBox,
    target: *const PbrBox,
    shrink: f64,
    img_w: f64,
    img_h: f64,
    sigma_out: *mut f64,
) -> PbrStatus {
    non_null!(bbox, target, sigma_out);
    guard(|| {
        let b = try_status!(to_bbox(&*bbox));
        let t = try_status!(to_bbox(&*target));
        let s = try_status!(boundary_areas(&b, shrink, img_w, img_h)
            .and_then(|a| encode_sigma(&a, &b, shrink, &t))
            .map_err(|e| fail(PbrStatus::InvalidArgument, e.to_string())));
        std::slice::from_raw_parts_mut(sigma_out, 4).copy_from_slice(&s.to_array());
        PbrStatus::Ok
    })
}

/// Box implied by side displacements `sigma[4]` on the boundary areas of `bbox`, reordered and clipped to the image.
#[no_mangle]
pub unsafe extern "C" fn pbr_decode_sigma(
    bbox: *const PbrBox,
    sigma: *const f64,
    shrink: f64,
    img_w: f64,
    img_h: f64,
    out: *mut PbrBox,
) -> PbrStatus {
    non_null!(bbox, sigma, out);
    guard(|| {
        let b = try_status!(to_bbox(&*bbox));
        let s = std::slice::from_raw_parts(sigma, 4);
        let s = Sigma::new(s[0], s[1], s[2], s[3]);
        let d = try_status!(boundary_areas(&b, shrink, img_w, img_h)
            .and_then(|a| decode_box(&a, &b, shrink, &s))
            .map_err(|e| fail(PbrStatus::InvalidArgument, e.to_string())));
        *out = from_bbox(&d.bbox);
        PbrStatus::Ok
    })
}

/// Loads a checkpoint directory written by `pbr train`.
#[no_mangle]
pub unsafe extern "C" fn pbr_detector_load(dir: *const c_char, out: *mut *mut PbrDetector) -> PbrStatus {
    non_null!(dir, out);
    guard(|| {
        *out = ptr::null_mut();
        let Ok(dir) = CStr::from_ptr(dir).to_str() else {
            return fail(PbrStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match Detector::load(Path::new(dir)) {
            Ok(det) => {
                *out = Box::into_raw(Box::new(PbrDetector { inner: det }));
                PbrStatus::Ok
            }
            Err(e) => fail(PbrStatus::Checkpoint, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn pbr_detector_free(det: *mut PbrDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Square input size in pixels the detector expects.
#[no_mangle]
pub unsafe extern "C" fn pbr_detector_image_size(det: *const PbrDetector, out: *mut usize) -> PbrStatus {
    non_null!(det, out);
    *out = (*det).inner.config.image_size;
    PbrStatus::Ok
}

/// Detects objects in an interleaved 8-bit RGB image of `width * height * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn pbr_detector_infer(
    det: *const PbrDetector,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut *mut PbrDetections,
) -> PbrStatus {
    non_null!(det, rgb, out);
    guard(|| {
        *out = ptr::null_mut();
        let det = &(*det).inner;
        let n = det.config.image_size;
        if width != n || height != n {
            return fail(PbrStatus::InvalidArgument, format!("{width}x{height} image, detector expects {n}x{n}"));
        }
        let data = std::slice::from_raw_parts(rgb, width * height * 3).to_vec();
        let img = RgbImage { width, height, data };
        match infer(det, &img.to_tensor()) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(PbrDetections { inner: d }));
                PbrStatus::Ok
            }
            Err(e) => fail(PbrStatus::Runtime, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn pbr_detections_free(dets: *mut PbrDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Number of detections; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn pbr_detections_len(dets: *const PbrDetections) -> usize {
    if dets.is_null() {
        0
    } else {
        (*dets).inner.len()
    }
}

/// Number of boxes per detection (stage count); 0 for NULL or an empty set.
#[no_mangle]
pub unsafe extern "C" fn pbr_detections_num_stages(dets: *const PbrDetections) -> usize {
    if dets.is_null() {
        0
    } else {
        (*dets).inner.first().map_or(0, |d| d.boxes.len())
    }
}

/// Detection `index` (score order) with its box after stage `stage` (0-based).
/// Any of `bbox`, `category`, `score` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn pbr_detections_get(
    dets: *const PbrDetections,
    index: usize,
    stage: usize,
    bbox: *mut PbrBox,
    category: *mut usize,
    score: *mut f64,
) -> PbrStatus {
    non_null!(dets);
    let all = &(*dets).inner;
    let Some(d) = all.get(index) else {
        return fail(PbrStatus::InvalidArgument, format!("index {index} out of range ({} detections)", all.len()));
    };
    let Some(b) = d.boxes.get(stage) else {
        return fail(PbrStatus::InvalidArgument, format!("stage {stage} out of range ({} stages)", d.boxes.len()));
    };
    if !bbox.is_null() {
        *bbox = from_bbox(b);
    }
    if !category.is_null() {
        *category = d.category;
    }
    if !score.is_null() {
        *score = d.score;
    }
    PbrStatus::Ok
}
