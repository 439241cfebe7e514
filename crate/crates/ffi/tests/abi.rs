use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use clasp_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { clasp_last_error_message(buf.as_mut_ptr() as *mut c_char, buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn label_selection() {
    let s = [0.531, 0.661];
    let (mut id, mut score) = (0u8, 0.0);
    assert_eq!(unsafe { clasp_select_part_label(s.as_ptr(), 2, &mut id, &mut score) }, ClaspStatus::Ok);
    assert_eq!((id, score), (2, 0.661));

    let (mut idx, mut score) = (0i64, 0.0);
    let g = [0.948, 0.052];
    assert_eq!(unsafe { clasp_select_attribute_label(g.as_ptr(), 2, 0.5, &mut idx, &mut score) }, ClaspStatus::Ok);
    assert_eq!(idx, 0);
    let weak = [0.4, 0.3];
    assert_eq!(unsafe { clasp_select_attribute_label(weak.as_ptr(), 2, 0.5, &mut idx, &mut score) }, ClaspStatus::Ok);
    assert_eq!(idx, -1);
}

#[test]
fn fixtures_through_the_abi() {
    let mut v = 0.0;
    let gates = [1.0, 0.0, 1.0, 0.0];
    assert_eq!(unsafe { clasp_balancing_loss(gates.as_ptr(), 2, 2, &mut v) }, ClaspStatus::Ok);
    assert!((v - 0.02).abs() <= 1e-9);

    let u = [0.25; 4];
    assert_eq!(unsafe { clasp_cv2(u.as_ptr(), 4, &mut v) }, ClaspStatus::Ok);
    assert_eq!(v, 0.0);

    // three tasks, one layer, two dims
    let g = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { clasp_conflict_ratio(g.as_ptr(), 3, 1, 2, &mut v) }, ClaspStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);

    let (a, b) = ([0.7, 0.3], [0.3, 0.7]);
    assert_eq!(unsafe { clasp_expert_activation_divergence(a.as_ptr(), b.as_ptr(), 2, &mut v) }, ClaspStatus::Ok);
    assert!((v - 0.7).abs() < 1e-12);
}

#[test]
fn errors_are_reported() {
    let mut v = 0.0;
    assert_eq!(unsafe { clasp_cv2(ptr::null(), 3, &mut v) }, ClaspStatus::NullPointer);
    assert!(last_error().contains("values"));
    assert_eq!(unsafe { clasp_harmonic_mean(0.0, 1.0, &mut v) }, ClaspStatus::InvalidArgument);
    assert!(last_error().contains("harmonic"));
    assert_eq!(unsafe { clasp_harmonic_mean(1.0, 1.0, &mut v) }, ClaspStatus::Ok);
    assert_eq!(last_error(), "");

    let mut t = ptr::null_mut();
    let bad = CString::new(r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(unsafe { clasp_trainer_new(bad.as_ptr(), &mut t) }, ClaspStatus::InvalidArgument);
    assert!(t.is_null());
    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_eq!(unsafe { clasp_trainer_load(missing.as_ptr(), &mut t) }, ClaspStatus::Io);
    assert!(last_error().contains("/nonexistent/x.ckpt"));
    unsafe { clasp_trainer_free(ptr::null_mut()) };
}

#[test]
fn trainer_round_trip() {
    let cfg = CString::new(r#"{"dataset_size": 6, "batch_size": 2, "eval_size": 2, "steps": 4}"#).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { clasp_trainer_new(cfg.as_ptr(), &mut t) }, ClaspStatus::Ok);
    let mut loss = ClaspLoss::default();
    for _ in 0..2 {
        assert_eq!(unsafe { clasp_trainer_step(t, &mut loss) }, ClaspStatus::Ok);
    }
    assert!(loss.total.is_finite() && loss.total > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    assert_eq!(unsafe { clasp_trainer_save(t, cstr(&path).as_ptr()) }, ClaspStatus::Ok);
    let mut u = ptr::null_mut();
    assert_eq!(unsafe { clasp_trainer_load(cstr(&path).as_ptr(), &mut u) }, ClaspStatus::Ok);
    let (mut s1, mut s2) = (0u64, 0u64);
    unsafe {
        clasp_trainer_step_count(t, &mut s1);
        clasp_trainer_step_count(u, &mut s2);
    }
    assert_eq!((s1, s2), (2, 2));

    // both continue identically
    let (mut a, mut b) = (ClaspLoss::default(), ClaspLoss::default());
    unsafe {
        assert_eq!(clasp_trainer_step(t, &mut a), ClaspStatus::Ok);
        assert_eq!(clasp_trainer_step(u, &mut b), ClaspStatus::Ok);
    }
    assert_eq!(a, b);

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    let mut w = ptr::null_mut();
    assert_eq!(unsafe { clasp_trainer_load(cstr(&path).as_ptr(), &mut w) }, ClaspStatus::Checksum);
    assert!(w.is_null());
    unsafe {
        clasp_trainer_free(t);
        clasp_trainer_free(u);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/abi-xxxx
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libclasp_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C build failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
