use pbr_core::detector::{Detector, DetectorConfig};
use pbr_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    let p = pbr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(pbr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn iou_and_invalid_box() {
    let a = PbrBox { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 };
    let b = PbrBox { x1: 1.0, y1: 0.0, x2: 3.0, y2: 2.0 };
    let mut out = 0.0;
    assert_eq!(unsafe { pbr_iou(&a, &b, &mut out) }, PbrStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-12);
    let bad = PbrBox { x1: 3.0, y1: 0.0, x2: 1.0, y2: 2.0 };
    assert_eq!(unsafe { pbr_iou(&a, &bad, &mut out) }, PbrStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { pbr_iou(ptr::null(), &b, &mut out) }, PbrStatus::NullPointer);
    assert!(last_error().contains("null"));
}

#[test]
fn sigma_round_trip() {
    let bbox = PbrBox { x1: 30.0, y1: 40.0, x2: 70.0, y2: 90.0 };
    let target = PbrBox { x1: 33.5, y1: 37.0, x2: 68.0, y2: 95.25 };
    let mut c = 0.0;
    assert_eq!(unsafe { pbr_shrink_factor(1, &mut c) }, PbrStatus::Ok);
    assert_eq!(c, 0.5);
    assert_eq!(unsafe { pbr_shrink_factor(0, &mut c) }, PbrStatus::InvalidArgument);
    let mut sigma = [0.0; 4];
    assert_eq!(unsafe { pbr_encode_sigma(&bbox, &target, 0.5, 128.0, 128.0, sigma.as_mut_ptr()) }, PbrStatus::Ok);
    let mut back = PbrBox::default();
    assert_eq!(unsafe { pbr_decode_sigma(&bbox, sigma.as_ptr(), 0.5, 128.0, 128.0, &mut back) }, PbrStatus::Ok);
    for (x, y) in [(back.x1, target.x1), (back.y1, target.y1), (back.x2, target.x2), (back.y2, target.y2)] {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn detector_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DetectorConfig { channels: 8, backbone_widths: [4, 8, 8, 8, 8], head_hidden: 16, ..DetectorConfig::default() };
    Detector::new(cfg).unwrap().save(dir.path()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { pbr_detector_load(path.as_ptr(), &mut det) }, PbrStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { pbr_detector_image_size(det, &mut n) }, PbrStatus::Ok);
    assert_eq!(n, 128);

    let rgb: Vec<u8> = (0..n * n * 3).map(|i| (i * 7 % 251) as u8).collect();
    let mut dets = ptr::null_mut();
    assert_eq!(unsafe { pbr_detector_infer(det, rgb.as_ptr(), n, n - 1, &mut dets) }, PbrStatus::InvalidArgument);
    assert!(dets.is_null());
    assert_eq!(unsafe { pbr_detector_infer(det, rgb.as_ptr(), n, n, &mut dets) }, PbrStatus::Ok);
    let len = unsafe { pbr_detections_len(dets) };
    // an untrained head scores every class equally, above the 0.05 threshold
    assert!(len > 0);
    assert_eq!(unsafe { pbr_detections_num_stages(dets) }, 3);
    let (mut b, mut cat, mut score) = (PbrBox::default(), 0usize, 0.0);
    assert_eq!(unsafe { pbr_detections_get(dets, 0, 2, &mut b, &mut cat, &mut score) }, PbrStatus::Ok);
    assert!(b.x1 <= b.x2 && b.y1 <= b.y2 && cat < 5 && score > 0.05);
    assert_eq!(unsafe { pbr_detections_get(dets, len, 0, &mut b, ptr::null_mut(), ptr::null_mut()) }, PbrStatus::InvalidArgument);
    assert_eq!(unsafe { pbr_detections_get(dets, 0, 3, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, PbrStatus::InvalidArgument);
    unsafe {
        pbr_detections_free(dets);
        pbr_detector_free(det);
        pbr_detections_free(ptr::null_mut());
        pbr_detector_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let path = CString::new("/nonexistent/pbr-checkpoint").unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { pbr_detector_load(path.as_ptr(), &mut det) }, PbrStatus::Checkpoint);
    assert!(det.is_null());
    assert!(last_error().contains("nonexistent"));
}
