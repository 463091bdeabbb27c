use std::ffi::{CStr, CString};
use std::ptr;

use markov_tower_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mt_last_error_message()).to_string_lossy().into_owned() }
}

fn model(name: &str) -> *mut MtModel {
    let n = CString::new(name).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mt_model_new(n.as_ptr(), f64::NAN, 0, &mut m) }, MtStatus::Ok);
    m
}

#[test]
fn doubling_evaluates_and_inverts() {
    let m = model("doubling");
    let mut y = 0.0;
    unsafe {
        assert_eq!(mt_model_evaluate(m, 0.3, &mut y), MtStatus::Ok);
        assert!((y - 0.6).abs() < 1e-15);
        let mut buf = [0.0; 2];
        let mut len = 0;
        assert_eq!(mt_model_preimages(m, 0.5, buf.as_mut_ptr(), 2, &mut len), MtStatus::Ok);
        assert_eq!(len, 2);
        assert_eq!(buf, [0.25, 0.75]);
        assert_eq!(mt_model_preimages(m, 0.5, buf.as_mut_ptr(), 1, &mut len), MtStatus::BufferTooSmall);
        assert_eq!(len, 2);
        mt_model_free(m);
    }
}

#[test]
fn errors_are_reported() {
    let n = CString::new("tent").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mt_model_new(n.as_ptr(), f64::NAN, 0, &mut m) }, MtStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("tent"));
    assert_eq!(unsafe { mt_model_new(ptr::null(), f64::NAN, 0, &mut m) }, MtStatus::NullPointer);
    let n = CString::new("lsv").unwrap();
    assert_eq!(unsafe { mt_model_new(n.as_ptr(), 2.0, 0, &mut m) }, MtStatus::Config);
    unsafe {
        mt_model_free(ptr::null_mut());
        mt_tower_free(ptr::null_mut());
    }
}

#[test]
fn doubling_tower_conserves_measure() {
    let m = model("doubling");
    let cfg = MtTowerConfig { n_max: 20, particles: 2000, p: 0.0, ..mt_tower_config_default() };
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(mt_tower_run(m, &cfg, &mut t), MtStatus::Ok, "{}", last_error());
        let (mut count, mut steps) = (0, 0);
        assert_eq!(mt_tower_element_count(t, &mut count), MtStatus::Ok);
        assert_eq!(mt_tower_step_count(t, &mut steps), MtStatus::Ok);
        assert_eq!(steps, 21);
        assert!(count > 0);
        let mut captured = 0.0;
        for i in 0..count {
            let mut e = MtElement::default();
            assert_eq!(mt_tower_element(t, i, &mut e), MtStatus::Ok);
            assert!(e.return_time >= cfg.r0 && e.return_time <= cfg.n_max);
            captured += e.log_measure.exp();
        }
        let (mut d0, mut dn) = (0.0, 0.0);
        assert_eq!(mt_tower_leb_delta(t, 0, &mut d0), MtStatus::Ok);
        assert_eq!(mt_tower_leb_delta(t, 20, &mut dn), MtStatus::Ok);
        assert!((d0 - 0.02).abs() < 1e-15);
        assert!(dn < d0);
        assert!(captured <= d0 - dn + 1e-12);
        let mut e = MtElement::default();
        assert_eq!(mt_tower_element(t, count, &mut e), MtStatus::OutOfRange);
        assert_eq!(mt_tower_leb_delta(t, 21, &mut dn), MtStatus::OutOfRange);
        mt_tower_free(t);
        mt_model_free(m);
    }
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/markov_tower.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for f in exports {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"markov_tower.h\"\nint main(void) { MtTowerConfig c = mt_tower_config_default(); return (int)c.r0 - 12; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output();
    match out {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("no C compiler; header syntax check skipped"),
    }
}
