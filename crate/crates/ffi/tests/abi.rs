use std::ffi::{CStr, CString};
use std::ptr;

use flowlab_ffi::*;

fn new_system(name: &str) -> *mut FlowlabSystem {
    let name = CString::new(name).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { flowlab_system_new(name.as_ptr(), &mut h) }, FlowlabStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn sphere_hp_through_the_abi() {
    let h = new_system("sphere(3)");
    assert_eq!(unsafe { flowlab_system_dim(h) }, 3);
    let x = [0.0, 0.0, 1.0];
    let v = [1.0, 0.0, 0.0];
    for backend in [FlowlabBackend::Ricci, FlowlabBackend::Gauss] {
        let mut out = f64::NAN;
        let st = unsafe { flowlab_eval_hp(h, x.as_ptr(), v.as_ptr(), 3, 2.0, backend, &mut out) };
        assert_eq!(st, FlowlabStatus::Ok);
        // p + 1 - n with n = 3
        assert!((out - 0.0).abs() < 1e-8, "{out}");
    }
    unsafe { flowlab_system_free(h) };
}

#[test]
fn errors_set_status_and_message() {
    let name = CString::new("no-such-system").unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { flowlab_system_new(name.as_ptr(), &mut h) };
    assert_eq!(st, FlowlabStatus::UnknownScenario);
    assert!(h.is_null());
    let msg = unsafe { CStr::from_ptr(flowlab_last_error()) }.to_str().unwrap();
    assert!(msg.contains("no-such-system"));

    let mut out = 0.0;
    let st = unsafe { flowlab_eval_hp(ptr::null(), ptr::null(), ptr::null(), 0, 1.0, FlowlabBackend::Euclidean, &mut out) };
    assert_eq!(st, FlowlabStatus::NullPointer);

    let h = new_system("ou(1)");
    let x = [0.0, 0.0];
    let st = unsafe { flowlab_eval_hp(h, x.as_ptr(), x.as_ptr(), 2, 1.0, FlowlabBackend::Euclidean, &mut out) };
    assert_eq!(st, FlowlabStatus::InvalidArgument);
    unsafe { flowlab_system_free(h) };
}

#[test]
fn certify_and_moments() {
    let h = new_system("ou(1)");
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { flowlab_certify_json(h, &mut s) }, FlowlabStatus::Ok);
    let json = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { flowlab_string_free(s) };
    assert!(json.contains("\"Cor5.2\""));

    let grid = [0.0, 1.0];
    let mut est = FlowlabEstimate::default();
    let st = unsafe { flowlab_sup_derivative_moment(h, grid.as_ptr(), 2, 1.0, 1.0, 1e-2, 50, 7, &mut est) };
    assert_eq!(st, FlowlabStatus::Ok);
    // OU derivative is deterministic and decreasing, so the running sup is 1
    assert!((est.value - 1.0).abs() < 1e-12, "{est:?}");
    assert_eq!(est.n, 50);
    unsafe { flowlab_system_free(h) };
}

#[test]
fn run_config_round_trip() {
    let cmd = CString::new("exponent").unwrap();
    let cfg = CString::new("scenario = \"ou(1)\"\npaths = 20\ndt = 0.01\n").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { flowlab_run_config_json(cmd.as_ptr(), cfg.as_ptr(), &mut s) }, FlowlabStatus::Ok);
    let json = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { flowlab_string_free(s) };
    assert!(json.contains("\"schema\": \"flowlab/1\""));

    let bad = CString::new("paths = \"many\"").unwrap();
    let mut s = ptr::null_mut();
    let st = unsafe { flowlab_run_config_json(cmd.as_ptr(), bad.as_ptr(), &mut s) };
    assert_eq!(st, FlowlabStatus::Config);
    assert!(s.is_null());
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/flowlab.h")).unwrap();
    for sym in ["flowlab_system_new", "flowlab_eval_hp", "flowlab_last_error", "FlowlabStatus", "typedef struct FlowlabSystem"] {
        assert!(header.contains(sym), "missing {sym}");
    }
}
