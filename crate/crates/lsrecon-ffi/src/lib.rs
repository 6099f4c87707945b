//! C ABI for the reconstruction pipeline: opaque handles, integer
//! status codes and a thread-local last-error message. The header is
//! generated by cbindgen into `include/lsrecon.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::ptr;

use lsrecon::pipeline::{run_with_cloud, RunConfig, RunReport};
use lsrecon::PointCloud;

/// Success.
pub const LSR_OK: c_int = 0;
/// Null pointer, invalid UTF-8 or misuse of the API.
pub const LSR_ERR_ARGUMENT: c_int = 1;
/// Invalid configuration or point cloud.
pub const LSR_ERR_CONFIG: c_int = 2;
/// Numerical failure (lost interface, empty band).
pub const LSR_ERR_NUMERICAL: c_int = 3;
/// File system failure.
pub const LSR_ERR_IO: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Opaque configuration handle.
pub struct LsrConfig {
    inner: RunConfig,
}

/// Opaque report handle.
pub struct LsrReport {
    inner: RunReport,
}

/// Returns the message of the most recent error on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a JSON configuration object into a new handle. On success
/// writes the handle to `out` and returns `LSR_OK`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsr_config_from_json(
    json: *const c_char,
    out: *mut *mut LsrConfig,
) -> c_int {
    if json.is_null() || out.is_null() {
        set_error("null pointer");
        return LSR_ERR_ARGUMENT;
    }
    let text = match CStr::from_ptr(json).to_str() {
        Ok(t) => t,
        Err(_) => {
            set_error("configuration is not valid UTF-8");
            return LSR_ERR_ARGUMENT;
        }
    };
    match RunConfig::from_json(text) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(LsrConfig { inner: cfg }));
            LSR_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            e.exit_code()
        }
    }
}

/// Releases a configuration handle. A null handle is a no-op.
///
/// # Safety
/// `cfg` must come from `lsr_config_from_json` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lsr_config_free(cfg: *mut LsrConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full pipeline on the cloud file named in the configuration.
/// On success writes a report handle to `out`.
///
/// # Safety
/// `cfg` must be a live configuration handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsr_run(cfg: *const LsrConfig, out: *mut *mut LsrReport) -> c_int {
    if cfg.is_null() || out.is_null() {
        set_error("null pointer");
        return LSR_ERR_ARGUMENT;
    }
    match lsrecon::pipeline::run(&(*cfg).inner) {
        Ok(report) => {
            *out = Box::into_raw(Box::new(LsrReport { inner: report }));
            LSR_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            e.exit_code()
        }
    }
}

/// Runs the pipeline on `npoints` packed coordinates (`dim` values per
/// point, original coordinates) instead of a file.
///
/// # Safety
/// `cfg` must be live; `points` must hold `npoints * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn lsr_run_on_points(
    cfg: *const LsrConfig,
    dim: c_int,
    points: *const c_double,
    npoints: usize,
    out: *mut *mut LsrReport,
) -> c_int {
    if cfg.is_null() || points.is_null() || out.is_null() {
        set_error("null pointer");
        return LSR_ERR_ARGUMENT;
    }
    if dim != 2 && dim != 3 {
        set_error("dim must be 2 or 3");
        return LSR_ERR_ARGUMENT;
    }
    let dim = dim as usize;
    let flat = std::slice::from_raw_parts(points, npoints * dim);
    let raw: Vec<[f64; 3]> = flat
        .chunks_exact(dim)
        .map(|c| {
            let mut p = [0.0; 3];
            p[..dim].copy_from_slice(c);
            p
        })
        .collect();
    let cloud = match PointCloud::from_points(dim, raw) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return LSR_ERR_CONFIG;
        }
    };
    match run_with_cloud(&(*cfg).inner, cloud) {
        Ok(report) => {
            *out = Box::into_raw(Box::new(LsrReport { inner: report }));
            LSR_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            e.exit_code()
        }
    }
}

/// Total iterations across all runs, or -1 on a null handle.
///
/// # Safety
/// `report` must be a live report handle.
#[no_mangle]
pub unsafe extern "C" fn lsr_report_total_iterations(report: *const LsrReport) -> c_int {
    if report.is_null() {
        return -1;
    }
    (*report).inner.total_iterations as c_int
}

/// Final mean cloud error, or NaN on a null handle.
///
/// # Safety
/// `report` must be a live report handle.
#[no_mangle]
pub unsafe extern "C" fn lsr_report_err_cloud(report: *const LsrReport) -> c_double {
    if report.is_null() {
        return f64::NAN;
    }
    (*report).inner.err_s
}

/// Serializes the report (iteration rows, per-run summaries, final
/// metrics) to a JSON string owned by the caller; release it with
/// `lsr_string_free`.
///
/// # Safety
/// `report` must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsr_report_to_json(
    report: *const LsrReport,
    out: *mut *mut c_char,
) -> c_int {
    if report.is_null() || out.is_null() {
        set_error("null pointer");
        return LSR_ERR_ARGUMENT;
    }
    match serde_json::to_string(&(*report).inner) {
        Ok(s) => {
            *out = CString::new(s).unwrap_or_default().into_raw();
            LSR_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            *out = ptr::null_mut();
            LSR_ERR_ARGUMENT
        }
    }
}

/// Releases a report handle. A null handle is a no-op.
///
/// # Safety
/// `report` must come from a run call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lsr_report_free(report: *mut LsrReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Releases a string returned by `lsr_report_to_json`.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lsr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
