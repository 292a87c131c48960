use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ltms_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ltms_last_error()) }.to_str().unwrap().to_string()
}

fn model() -> *mut LtmsModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ltms_model_new_default(3, &mut m) }, LtmsStatus::Ok);
    assert!(!m.is_null());
    m
}

/// Two agents moving along +x and +y for 20 steps at 10 Hz.
fn scene() -> (Vec<f64>, Vec<u8>) {
    let mut pos = Vec::new();
    for a in 0..2 {
        for t in 0..20 {
            let s = t as f64;
            if a == 0 {
                pos.extend([s, 0.0]);
            } else {
                pos.extend([5.0, -10.0 + 0.8 * s]);
            }
        }
    }
    (pos, vec![1; 40])
}

fn predict(m: *const LtmsModel, pos: &[f64], valid: &[u8]) -> (LtmsStatus, *mut LtmsPrediction) {
    let lanes = [0.0, 0.0, 30.0, 0.0];
    let flags = [2u8];
    let mut p = ptr::null_mut();
    let s = unsafe {
        ltms_predict(m, pos.as_ptr(), valid.as_ptr(), 2, 20, 10.0, lanes.as_ptr(), flags.as_ptr(), 1, &mut p)
    };
    (s, p)
}

#[test]
fn predict_and_read_back() {
    let m = model();
    let mut dims = LtmsDims::default();
    assert_eq!(unsafe { ltms_model_dims(m, &mut dims) }, LtmsStatus::Ok);
    assert_eq!((dims.hidden, dims.modes, dims.observed, dims.predicted), (64, 6, 20, 30));
    let mut count = 0;
    assert_eq!(unsafe { ltms_model_param_count(m, &mut count) }, LtmsStatus::Ok);
    assert!(count > 500_000);

    let (pos, valid) = scene();
    let (s, p) = predict(m, &pos, &valid);
    assert_eq!(s, LtmsStatus::Ok, "{}", last_error());
    let mut agents = 0;
    assert_eq!(unsafe { ltms_prediction_agents(p, &mut agents) }, LtmsStatus::Ok);
    assert_eq!(agents, 2);
    let mut idx = 9;
    assert_eq!(unsafe { ltms_prediction_agent_index(p, 1, &mut idx) }, LtmsStatus::Ok);
    assert_eq!(idx, 1);

    let mut probs = vec![0.0; 6];
    assert_eq!(unsafe { ltms_prediction_probabilities(p, 0, probs.as_mut_ptr(), 6) }, LtmsStatus::Ok);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let n = 6 * 30 * 2;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    assert_eq!(unsafe { ltms_prediction_locations(p, 0, false, a.as_mut_ptr(), n) }, LtmsStatus::Ok);
    assert_eq!(unsafe { ltms_prediction_locations(p, 0, true, b.as_mut_ptr(), n) }, LtmsStatus::Ok);
    // refinement starts as the identity
    assert_eq!(a, b);
    assert!(a.iter().all(|x| x.is_finite()));

    let s = unsafe { ltms_prediction_locations(p, 0, true, b.as_mut_ptr(), n - 1) };
    assert_eq!(s, LtmsStatus::BufferTooSmall);
    assert!(last_error().contains("needed"));
    assert_eq!(unsafe { ltms_prediction_probabilities(p, 2, probs.as_mut_ptr(), 6) }, LtmsStatus::InvalidArgument);

    unsafe {
        ltms_prediction_free(p);
        ltms_model_free(m);
    }
}

#[test]
fn invalid_scene_is_a_data_error() {
    let m = model();
    let (mut pos, valid) = scene();
    pos[3] = f64::NAN;
    let (s, p) = predict(m, &pos, &valid);
    assert_eq!(s, LtmsStatus::DataError);
    assert!(p.is_null());
    assert!(last_error().contains("non-finite"), "{}", last_error());
    let (s, _) = predict(ptr::null(), &pos, &valid);
    assert_eq!(s, LtmsStatus::NullArgument);
    unsafe { ltms_model_free(m) };
}

#[test]
fn save_and_load_give_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = model();
    assert_eq!(unsafe { ltms_model_save(m, path.as_ptr()) }, LtmsStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ltms_model_load(path.as_ptr(), &mut loaded) }, LtmsStatus::Ok);
    let (pos, valid) = scene();
    let read = |m| {
        let (s, p) = predict(m, &pos, &valid);
        assert_eq!(s, LtmsStatus::Ok);
        let mut v = vec![0.0; 360];
        unsafe {
            ltms_prediction_locations(p, 1, true, v.as_mut_ptr(), 360);
            ltms_prediction_free(p);
        }
        v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(read(m), read(loaded));
    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { ltms_model_load(missing.as_ptr(), &mut none) }, LtmsStatus::DataError);
    unsafe {
        ltms_model_free(m);
        ltms_model_free(loaded);
        ltms_model_free(ptr::null_mut());
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ltms.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["ltms_predict", "ltms_model_load", "ltms_last_error", "LTMS_STATUS_BUFFER_TOO_SMALL"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; skipped the syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
