//! C interface to flowlab.
//!
//! Systems are opaque handles created from a built-in scenario name. Every
//! fallible call returns a [`FlowlabStatus`]; on failure the message is
//! available from [`flowlab_last_error`] on the same thread. Strings handed
//! out by the library must be released with [`flowlab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use flowlab::app::{run, AppError, Command, RunConfig};
use flowlab::criteria::{certify, eval_hp, CertifyConfig, HpBackend};
use flowlab::estimators::{sup_derivative_moment, McConfig};
use flowlab::scenarios::{builtin, Scenario};
use flowlab::FlowError;

/// Opaque system handle.
pub struct FlowlabSystem {
    scenario: Scenario,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Contract = 4,
    Capability = 5,
    Singular = 6,
    Underflow = 7,
    Parse = 8,
    UnknownScenario = 9,
    Config = 10,
    Io = 11,
    InvalidEstimate = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowlabBackend {
    Euclidean = 0,
    Ricci = 1,
    Gauss = 2,
}

/// Summary of a Monte Carlo estimate.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowlabEstimate {
    pub value: f64,
    pub se: f64,
    pub uncertainty: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub truncations: usize,
    pub lower_bound_only: bool,
    pub invalid: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn flow_status(e: &FlowError) -> FlowlabStatus {
    match e {
        FlowError::Domain(_) => FlowlabStatus::Domain,
        FlowError::Contract(_) => FlowlabStatus::Contract,
        FlowError::Capability(_) => FlowlabStatus::Capability,
        FlowError::Singular(_) => FlowlabStatus::Singular,
        FlowError::Underflow { .. } => FlowlabStatus::Underflow,
        FlowError::Parse { .. } => FlowlabStatus::Parse,
        FlowError::UnknownScenario(_) => FlowlabStatus::UnknownScenario,
        FlowError::Config(_) => FlowlabStatus::Config,
        FlowError::Io(_) => FlowlabStatus::Io,
    }
}

struct Failure(FlowlabStatus, String);

impl From<FlowError> for Failure {
    fn from(e: FlowError) -> Self {
        Failure(flow_status(&e), e.to_string())
    }
}

impl From<AppError> for Failure {
    fn from(e: AppError) -> Self {
        match e {
            AppError::Flow(f) => f.into(),
            AppError::Validation(m) => Failure(FlowlabStatus::Config, m),
            AppError::Io(e) => Failure(FlowlabStatus::Io, e.to_string()),
        }
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(FlowlabStatus::InvalidArgument, msg.to_string())
}

fn null() -> Failure {
    Failure(FlowlabStatus::NullPointer, "null pointer argument".into())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FlowlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FlowlabStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FlowlabStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s).to_str().map_err(|_| invalid("string is not valid UTF-8"))
}

unsafe fn read_slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn system<'a>(h: *const FlowlabSystem) -> Result<&'a FlowlabSystem, Failure> {
    h.as_ref().ok_or_else(null)
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("output contains a NUL byte"))
}

/// Creates a handle for a built-in scenario such as `"ou(1)"` or `"sphere(3)"`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flowlab_system_new(name: *const c_char, out: *mut *mut FlowlabSystem) -> FlowlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let scenario = builtin(read_str(name)?)?;
        *out = Box::into_raw(Box::new(FlowlabSystem { scenario }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `handle` must come from `flowlab_system_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flowlab_system_free(handle: *mut FlowlabSystem) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Ambient dimension of the state, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flowlab_system_dim(handle: *const FlowlabSystem) -> usize {
    handle.as_ref().map_or(0, |h| h.scenario.system.dim())
}

/// Evaluates `H_p(x)(v, v)`; `x` and `v` have `len` entries.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn flowlab_eval_hp(
    handle: *const FlowlabSystem,
    x: *const f64,
    v: *const f64,
    len: usize,
    p: f64,
    backend: FlowlabBackend,
    out: *mut f64,
) -> FlowlabStatus {
    guard(|| {
        let h = system(handle)?;
        if out.is_null() {
            return Err(null());
        }
        if len != h.scenario.system.dim() {
            return Err(invalid("length does not match the system dimension"));
        }
        let backend = match backend {
            FlowlabBackend::Euclidean => HpBackend::Euclidean,
            FlowlabBackend::Ricci => HpBackend::Ricci,
            FlowlabBackend::Gauss => HpBackend::Gauss,
        };
        let sc = &h.scenario;
        *out = eval_hp(&sc.system, sc.curvature.as_ref(), read_slice(x, len)?, read_slice(v, len)?, p, backend)?;
        Ok(())
    })
}

/// Certifies every theorem with default sampling; writes a JSON string.
///
/// # Safety
/// `out` must be a valid pointer; free the result with `flowlab_string_free`.
#[no_mangle]
pub unsafe extern "C" fn flowlab_certify_json(handle: *const FlowlabSystem, out: *mut *mut c_char) -> FlowlabStatus {
    guard(|| {
        let h = system(handle)?;
        if out.is_null() {
            return Err(null());
        }
        let sc = &h.scenario;
        let report = certify(&sc.system, sc.curvature.as_ref(), &CertifyConfig::default());
        *out = into_c_string(report.to_json())?;
        Ok(())
    })
}

/// `sup_x E sup_{s≤t} |T_xF_s|^p` over the `count` points packed in `grid`.
///
/// # Safety
/// `grid` must hold `count * dim` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn flowlab_sup_derivative_moment(
    handle: *const FlowlabSystem,
    grid: *const f64,
    count: usize,
    p: f64,
    t: f64,
    dt: f64,
    paths: usize,
    seed: u64,
    out: *mut FlowlabEstimate,
) -> FlowlabStatus {
    guard(|| {
        let h = system(handle)?;
        if out.is_null() {
            return Err(null());
        }
        let d = h.scenario.system.dim();
        if count == 0 {
            return Err(invalid("grid is empty"));
        }
        let pts: Vec<Vec<f64>> = read_slice(grid, count * d)?.chunks(d).map(<[f64]>::to_vec).collect();
        let cfg = McConfig::new(paths, t, dt, seed)?;
        let est = sup_derivative_moment(&h.scenario.system, &pts, p, &cfg)?;
        let e = &est.sup;
        *out = FlowlabEstimate {
            value: e.value,
            se: e.se,
            uncertainty: e.uncertainty,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            n: e.n,
            truncations: e.truncations,
            lower_bound_only: e.lower_bound_only,
            invalid: e.invalid,
        };
        if e.invalid {
            return Err(Failure(FlowlabStatus::InvalidEstimate, "every path was truncated".into()));
        }
        Ok(())
    })
}

/// Runs a CLI command (e.g. `"exponent"`) on a TOML configuration and
/// writes the JSON report. A report whose estimates are invalid is still
/// written and the call returns `InvalidEstimate`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn flowlab_run_config_json(
    command: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut c_char,
) -> FlowlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let name = read_str(command)?;
        let command: Command = name.parse().map_err(|_| invalid(&format!("unknown command `{name}`")))?;
        let cfg = RunConfig::parse(read_str(config_toml)?)?;
        let result = run(&cfg, command)?;
        *out = into_c_string(result.report)?;
        if result.invalid {
            return Err(Failure(FlowlabStatus::InvalidEstimate, "at least one estimate is invalid".into()));
        }
        Ok(())
    })
}

/// Releases a string returned by the library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flowlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn flowlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
