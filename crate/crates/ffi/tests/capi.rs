use std::ffi::{CStr, CString};
use std::fs;
use std::path::Path;
use std::ptr;

use targeted_fx::simulation::{ancestral_sample, GenerativeSpec};
use targeted_fx_ffi::*;

const SPEC: &str = r#"
[covariates]
kind = "normal"
w_dim = 1
[[treatments]]
name = "A1"
levels = ["0", "1"]
logit_coefficients = [[0.0, 0.5]]
[[treatments]]
name = "A2"
levels = ["0", "1"]
logit_coefficients = [[-0.3, -0.4]]
[outcome]
noise = { family = "gaussian", sd = 1.0 }
formula_terms = [
    { coef = 0.5, factors = [{ dosage = "A1" }] },
    { coef = 1.0, factors = [{ w = 0 }] },
]
"#;

fn write_run(dir: &Path) -> CString {
    let spec: GenerativeSpec = toml::from_str(SPEC).unwrap();
    ancestral_sample(&spec, 800, 3)
        .unwrap()
        .to_csv(&dir.join("data.csv"))
        .unwrap();
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        r#"
estimators = ["plugin", "tmle"]
[data]
path = "data.csv"
outcomes = [{ name = "Y", kind = "continuous" }]
treatments = ["A1", "A2"]
covariates = ["PC1"]
[[estimands]]
name = "ate_a1"
kind = "ate"
treatments = ["A1"]
from = ["0"]
to = ["1"]
"#,
    )
    .unwrap();
    CString::new(cfg.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = tfx_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn estimate_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_run(dir.path());
    let out_dir = CString::new(dir.path().join("out").to_str().unwrap()).unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(tfx_config_load(path.as_ptr(), &mut cfg), TfxStatus::Ok);
        assert!(tfx_last_error().is_null());
        let mut count = 0;
        assert_eq!(tfx_config_estimand_count(cfg, &mut count), TfxStatus::Ok);
        assert_eq!(count, 1);
        assert_eq!(tfx_config_set_output(cfg, out_dir.as_ptr()), TfxStatus::Ok);

        let mut res = ptr::null_mut();
        assert_eq!(tfx_estimate(cfg, &mut res), TfxStatus::Ok);
        assert_eq!(tfx_results_len(res), 2);
        assert!(tfx_results_clean(res));
        let name = CStr::from_ptr(tfx_results_name(res, 1)).to_str().unwrap();
        assert_eq!(name, "ate_a1:tmle");
        assert!(tfx_results_name(res, 2).is_null());

        let mut est = std::mem::zeroed::<TfxEstimate>();
        assert_eq!(tfx_results_get(res, 1, &mut est), TfxStatus::Ok);
        assert_eq!(est.status, TfxRecordStatus::Ok);
        assert_eq!(est.n, 800);
        assert!(est.ci_lower < est.estimate && est.estimate < est.ci_upper);
        assert!((est.estimate - 0.5).abs() < 4.0 * est.std_error);
        assert_eq!(tfx_results_get(res, 5, &mut est), TfxStatus::OutOfRange);
        assert!(last_error().contains("out of range"));

        tfx_results_free(res);
        tfx_config_free(cfg);
    }
    assert!(dir.path().join("out/results.jsonl").exists());
}

#[test]
fn errors_are_reported_by_code_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, "unknown_key = 1\n").unwrap();
    let bad = CString::new(cfg_path.to_str().unwrap()).unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(tfx_config_load(bad.as_ptr(), &mut cfg), TfxStatus::Config);
        assert!(cfg.is_null());
        assert!(last_error().contains("unknown_key"));

        let missing = CString::new(dir.path().join("nope.toml").to_str().unwrap()).unwrap();
        assert_eq!(tfx_config_load(missing.as_ptr(), &mut cfg), TfxStatus::Io);
        assert_eq!(
            tfx_config_load(ptr::null(), &mut cfg),
            TfxStatus::NullPointer
        );
        assert_eq!(
            tfx_config_load(bad.as_ptr(), ptr::null_mut()),
            TfxStatus::NullPointer
        );

        let mut res = ptr::null_mut();
        assert_eq!(tfx_estimate(ptr::null(), &mut res), TfxStatus::NullPointer);
        assert_eq!(tfx_results_len(ptr::null()), 0);
        tfx_results_free(ptr::null_mut());
        tfx_config_free(ptr::null_mut());
        tfx_grm_free(ptr::null_mut());
    }
}

#[test]
fn grm_hand_example_and_roundtrip() {
    let dosages: [i8; 6] = [0, 2, 2, 0, 1, 1];
    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("g.grm").to_str().unwrap()).unwrap();
    unsafe {
        let mut grm = ptr::null_mut();
        assert_eq!(
            tfx_grm_compute(dosages.as_ptr(), 3, 2, 1, &mut grm),
            TfxStatus::Ok
        );
        assert_eq!(tfx_grm_n(grm), 3);
        let mut v = 0.0;
        assert_eq!(tfx_grm_get(grm, 0, 1, &mut v), TfxStatus::Ok);
        assert_eq!(v, -4.0);
        assert_eq!(tfx_grm_get(grm, 2, 0, &mut v), TfxStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(tfx_grm_get(grm, 3, 0, &mut v), TfxStatus::OutOfRange);

        assert_eq!(tfx_grm_write(grm, file.as_ptr()), TfxStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(tfx_grm_read(file.as_ptr(), &mut back), TfxStatus::Ok);
        assert_eq!(tfx_grm_get(back, 0, 1, &mut v), TfxStatus::Ok);
        assert_eq!(v, -4.0);
        tfx_grm_free(back);
        tfx_grm_free(grm);

        let bad: [i8; 2] = [3, 0];
        assert_eq!(
            tfx_grm_compute(bad.as_ptr(), 2, 1, 1, &mut grm),
            TfxStatus::InvalidArgument
        );
    }
}

#[test]
fn svp_curve_at_zero_is_iid() {
    // Four unrelated individuals over four variants with distinct genotypes.
    let dosages: [i8; 16] = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 1, 1, 1, 0];
    let eif = [0.5, -1.0, 2.0, -1.5];
    unsafe {
        let mut grm = ptr::null_mut();
        assert_eq!(
            tfx_grm_compute(dosages.as_ptr(), 4, 4, 2, &mut grm),
            TfxStatus::Ok
        );
        let mut curve = [0.0; 3];
        let mut plateau = 0.0;
        assert_eq!(
            tfx_svp_curve(eif.as_ptr(), grm, 3, 1.0, curve.as_mut_ptr(), &mut plateau),
            TfxStatus::Ok
        );
        let iid = eif.iter().map(|d| d * d).sum::<f64>() / 4.0;
        assert_eq!(curve[0], iid);
        assert_eq!(plateau, curve.iter().copied().fold(f64::MIN, f64::max));
        assert_eq!(
            tfx_svp_curve(eif.as_ptr(), grm, 0, 1.0, curve.as_mut_ptr(), &mut plateau),
            TfxStatus::InvalidArgument
        );
        tfx_grm_free(grm);
    }
}

#[test]
fn header_declares_the_api() {
    let header = fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/targeted_fx.h"
    ))
    .unwrap();
    for sym in [
        "tfx_config_load",
        "tfx_estimate",
        "tfx_grm_compute",
        "tfx_svp_curve",
        "tfx_last_error",
        "TFX_STATUS_CONFIG",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
