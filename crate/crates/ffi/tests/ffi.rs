use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use mchom_ffi::*;

const TINY: &str = r#"
seed = 3

[medium]
kind = "channels"
kappa_low = 1.0
kappa_high = 100.0
channels = 2
channel_width = 0.0625

[grid]
n_fine = 16
h_eps = 0.25
h_coarse = 0.5
k_layers = 2

[macro]
bc = "dirichlet"
"#;

fn last_error() -> String {
    let p = mchom_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config(text: &str) -> *mut MchomConfig {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { mchom_config_from_toml(c.as_ptr(), &mut cfg) }, MchomStatus::Ok);
    cfg
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(mchom_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn invalid_config_reports_code_and_message() {
    let text = CString::new(TINY.replace("h_coarse = 0.5", "h_coarse = 0.3")).unwrap();
    let mut cfg = ptr::null_mut();
    let s = unsafe { mchom_config_from_toml(text.as_ptr(), &mut cfg) };
    assert_eq!(s, MchomStatus::InvalidConfig);
    assert!(cfg.is_null());
    assert!(last_error().contains("h_coarse"));
}

#[test]
fn null_arguments_are_rejected() {
    assert_eq!(unsafe { mchom_config_default(ptr::null_mut()) }, MchomStatus::NullPointer);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mchom_medium_generate(ptr::null(), &mut m) }, MchomStatus::NullPointer);
    assert_eq!(unsafe { mchom_medium_num_cells(ptr::null()) }, 0);
    unsafe {
        mchom_config_free(ptr::null_mut());
        mchom_medium_free(ptr::null_mut());
        mchom_run_free(ptr::null_mut());
    }
}

#[test]
fn medium_round_trip_through_buffers() {
    let cfg = config(TINY);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mchom_medium_generate(cfg, &mut m) }, MchomStatus::Ok);
    let n = unsafe { mchom_medium_num_cells(m) };
    assert_eq!(n, 256);
    assert_eq!(unsafe { mchom_medium_contrast(m) }, 100.0);
    let mut small = vec![0.0; n - 1];
    assert_eq!(
        unsafe { mchom_medium_coefficients(m, small.as_mut_ptr(), small.len()) },
        MchomStatus::BufferTooSmall
    );
    let mut kappa = vec![0.0; n];
    let mut labels = vec![9u8; n];
    assert_eq!(unsafe { mchom_medium_coefficients(m, kappa.as_mut_ptr(), n) }, MchomStatus::Ok);
    assert_eq!(unsafe { mchom_medium_labels(m, labels.as_mut_ptr(), n) }, MchomStatus::Ok);
    for (k, l) in kappa.iter().zip(&labels) {
        assert_eq!(*l == 1, *k == 100.0);
    }
    unsafe {
        mchom_medium_free(m);
        mchom_config_free(cfg);
    }
}

#[test]
fn pipeline_run_exposes_report_and_fields() {
    let cfg = config(TINY);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { mchom_run_pipeline(cfg, ptr::null(), 1, &mut run) }, MchomStatus::Ok);
    let mut rep = MchomReport::default();
    assert_eq!(unsafe { mchom_run_report(run, &mut rep) }, MchomStatus::Ok);
    assert_eq!(rep.k_layers, 2);
    assert!(rep.identity_discrepancy <= 1e-11);
    assert!(rep.mean_preservation <= 1e-7);
    assert_eq!(unsafe { mchom_run_field_len(run, MchomField::Fine) }, 17 * 17);
    assert_eq!(unsafe { mchom_run_field_len(run, MchomField::Macro1) }, 9);
    let mut u = vec![0.0; 17 * 17];
    assert_eq!(
        unsafe { mchom_run_field(run, MchomField::Fine, u.as_mut_ptr(), u.len()) },
        MchomStatus::Ok
    );
    assert!(u.iter().any(|v| *v > 0.0));
    unsafe {
        mchom_run_free(run);
        mchom_config_free(cfg);
    }
}

#[test]
fn run_without_macro_has_no_macro_field() {
    let cfg = config(TINY);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { mchom_run_pipeline(cfg, ptr::null(), 0, &mut run) }, MchomStatus::Ok);
    assert_eq!(unsafe { mchom_run_field_len(run, MchomField::Macro0) }, 0);
    let mut buf = [0.0; 9];
    assert_eq!(
        unsafe { mchom_run_field(run, MchomField::Macro0, buf.as_mut_ptr(), 9) },
        MchomStatus::InvalidArgument
    );
    unsafe {
        mchom_run_free(run);
        mchom_config_free(cfg);
    }
}

#[test]
fn generated_header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/mchom.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["mchom_run_pipeline", "mchom_last_error", "MCHOM_STATUS_OK", "typedef struct MchomRun MchomRun"] {
        assert!(text.contains(sym), "{sym}");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).output() else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
