use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use vgfm_ffi::*;

fn last_error() -> String {
    let p = vgfm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn dataset_from_arrays_and_shape() {
    let counts = [2usize, 3];
    let pts = [0.0, 0.0, 1.0, 1.0, 0.5, 0.5, 2.0, 2.0, 3.0, 1.0];
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(vgfm_dataset_new(2, counts.as_ptr(), 2, pts.as_ptr(), &mut ds), VgfmStatus::Ok);
        let (mut t, mut d, mut n) = (0usize, 0usize, 0usize);
        assert_eq!(vgfm_dataset_shape(ds, &mut t, &mut d), VgfmStatus::Ok);
        assert_eq!((t, d), (2, 2));
        assert_eq!(vgfm_dataset_count(ds, 1, &mut n), VgfmStatus::Ok);
        assert_eq!(n, 3);
        assert_eq!(vgfm_dataset_count(ds, 5, &mut n), VgfmStatus::InvalidArgument);
        vgfm_dataset_free(ds);
    }
}

#[test]
fn null_and_missing_file_errors() {
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(vgfm_dataset_load_csv(ptr::null(), &mut ds), VgfmStatus::NullPointer);
        let p = CString::new("/nonexistent/x.csv").unwrap();
        assert_eq!(vgfm_dataset_load_csv(p.as_ptr(), &mut ds), VgfmStatus::Io);
        assert!(last_error().contains("x.csv"));
        assert!(ds.is_null());
        vgfm_dataset_free(ptr::null_mut());
        vgfm_model_free(ptr::null_mut());
    }
}

#[test]
fn model_round_trip_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("m.ckpt"));
    let mut m = ptr::null_mut();
    let mut back = ptr::null_mut();
    let x = [0.1, 0.2, -0.3, 0.4, 1.0, 0.0];
    unsafe {
        assert_eq!(vgfm_model_init(2, 8, 3, 5, &mut m), VgfmStatus::Ok);
        assert_eq!(vgfm_model_save(m, path.as_ptr()), VgfmStatus::Ok);
        assert_eq!(vgfm_model_load(path.as_ptr(), &mut back), VgfmStatus::Ok);
        let mut d = 0usize;
        assert_eq!(vgfm_model_dim(back, &mut d), VgfmStatus::Ok);
        assert_eq!(d, 2);
        let (mut v1, mut v2) = ([0.0; 6], [0.0; 6]);
        assert_eq!(vgfm_model_velocity(m, x.as_ptr(), 3, 0.5, v1.as_mut_ptr()), VgfmStatus::Ok);
        assert_eq!(vgfm_model_velocity(back, x.as_ptr(), 3, 0.5, v2.as_mut_ptr()), VgfmStatus::Ok);
        assert_eq!(v1, v2);
        let mut g = [0.0; 3];
        assert_eq!(vgfm_model_growth(m, x.as_ptr(), 3, 0.5, g.as_mut_ptr()), VgfmStatus::Ok);
        let (mut xf, mut lw) = ([0.0; 6], [0.0; 3]);
        assert_eq!(
            vgfm_model_simulate(m, x.as_ptr(), 3, 0.0, 1.0, 20, xf.as_mut_ptr(), lw.as_mut_ptr()),
            VgfmStatus::Ok
        );
        assert!(xf.iter().chain(&lw).all(|v| v.is_finite()));
        assert_eq!(vgfm_model_simulate(m, x.as_ptr(), 3, 1.0, 0.0, 20, xf.as_mut_ptr(), lw.as_mut_ptr()), VgfmStatus::InvalidArgument);
        vgfm_model_free(m);
        vgfm_model_free(back);
        let bad = cstr(&dir.path().join("missing.ckpt"));
        assert_eq!(vgfm_model_load(bad.as_ptr(), &mut back), VgfmStatus::Io);
        std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint at all").unwrap();
        let junk = cstr(&dir.path().join("junk.ckpt"));
        assert_eq!(vgfm_model_load(junk.as_ptr(), &mut back), VgfmStatus::Checkpoint);
    }
}

#[test]
fn w1_through_abi() {
    let a = [0.0, 0.0];
    let b = [1.7, 0.0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(vgfm_w1(a.as_ptr(), 1, ptr::null(), b.as_ptr(), 1, 2, &mut out), VgfmStatus::Ok);
        assert!((out - 1.7).abs() < 1e-12);
        let w = [-1.0];
        assert_eq!(vgfm_w1(a.as_ptr(), 1, w.as_ptr(), b.as_ptr(), 1, 2, &mut out), VgfmStatus::InvalidArgument);
    }
}

#[test]
fn tiny_training_run() {
    let counts = [4usize, 4];
    let pts: Vec<f64> = (0..8).flat_map(|i| [i as f64 * 0.1, (i / 4) as f64]).collect();
    let cfg = CString::new(r#"{"warmup_iters": 3, "joint_epochs": 1, "batch": 4, "width": 8}"#).unwrap();
    let bad = CString::new(r#"{"no_such_key": 1}"#).unwrap();
    let mut ds = ptr::null_mut();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(vgfm_dataset_new(2, counts.as_ptr(), 2, pts.as_ptr(), &mut ds), VgfmStatus::Ok);
        assert_eq!(vgfm_train(ds, bad.as_ptr(), &mut m), VgfmStatus::InvalidArgument);
        assert!(last_error().contains("no_such_key"));
        assert_eq!(vgfm_train(ds, cfg.as_ptr(), &mut m), VgfmStatus::Ok);
        assert!(!m.is_null());
        vgfm_model_free(m);
        vgfm_dataset_free(ds);
    }
}

#[test]
fn header_is_valid_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/vgfm.h")).unwrap();
    for f in ["vgfm_dataset_load_csv", "vgfm_train", "vgfm_model_simulate", "vgfm_last_error_message", "VGFM_STATUS_OK"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the header"),
        Err(e) => eprintln!("skipping C syntax check: {cc} unavailable ({e})"),
    }
}
