//! C interface to `targeted-fx`.
//!
//! Every function returns a [`TfxStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`tfx_last_error`] until the next
//! call on the same thread. Objects are opaque handles released with their
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use targeted_fx::config::{validate_config_with, Normalized, Overrides};
use targeted_fx::relatedness::{compute_grm, default_grid, svp_curve, Genotypes, Grm, PlateauRule};
use targeted_fx::runner::{run_estimation, ResultRecord, Status};
use targeted_fx::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Estimation = 6,
    OutOfRange = 7,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfxRecordStatus {
    Ok = 0,
    Filtered = 1,
    Failed = 2,
}

/// Numeric summary of one result record. Fields are NaN (or 0 for `n`) when
/// the record has no estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TfxEstimate {
    pub status: TfxRecordStatus,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Validated run configuration with its dataset loaded.
pub struct TfxConfig(Normalized);

/// Records from a completed estimation run, with names kept alive for the
/// lifetime of the handle.
pub struct TfxResults {
    records: Vec<ResultRecord>,
    names: Vec<CString>,
    clean: bool,
}

pub struct TfxGrm(Grm);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TfxStatus {
    match e {
        Error::Config(_) => TfxStatus::Config,
        Error::Io { .. } | Error::Csv(_) | Error::Format { .. } => TfxStatus::Io,
        Error::Invalid(_)
        | Error::LengthMismatch { .. }
        | Error::Empty(_)
        | Error::NonFinite(_) => TfxStatus::InvalidArgument,
        _ => TfxStatus::Estimation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (TfxStatus, String)>) -> TfxStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TfxStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TfxStatus::Panic
        }
    }
}

fn lib<T>(r: targeted_fx::Result<T>) -> Result<T, (TfxStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (TfxStatus, String) {
    (TfxStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (TfxStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (TfxStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (TfxStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next `tfx_*` call on the same thread.
#[no_mangle]
pub extern "C" fn tfx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tfx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a TOML run configuration.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_config_load(
    path: *const c_char,
    out: *mut *mut TfxConfig,
) -> TfxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let cfg = lib(validate_config_with(&path, &Overrides::default()))?;
        *out = Box::into_raw(Box::new(TfxConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from [`tfx_config_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tfx_config_free(cfg: *mut TfxConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Number of expanded estimands.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_config_estimand_count(
    cfg: *const TfxConfig,
    out: *mut usize,
) -> TfxStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = cfg.0.estimands.len();
        Ok(())
    })
}

/// Overrides the run seed before estimation.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tfx_config_set_seed(cfg: *mut TfxConfig, seed: u64) -> TfxStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.0.config.seed = seed;
        Ok(())
    })
}

/// Overrides the output directory before estimation.
///
/// # Safety
/// `cfg` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tfx_config_set_output(
    cfg: *mut TfxConfig,
    dir: *const c_char,
) -> TfxStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.0.config.output = dir;
        Ok(())
    })
}

/// Runs estimation, writing result files to the configured output directory.
/// A run with failed records still returns `Ok`; see [`tfx_results_clean`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_estimate(
    cfg: *const TfxConfig,
    out: *mut *mut TfxResults,
) -> TfxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = handle(cfg, "cfg")?;
        let run = lib(run_estimation(&cfg.0))?;
        let clean = run.is_clean();
        let names = run
            .records
            .iter()
            .map(|r| CString::new(format!("{}:{}", r.name, r.estimator.name())).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(TfxResults {
            records: run.records,
            names,
            clean,
        }));
        Ok(())
    })
}

/// # Safety
/// `res` must be NULL or a handle from [`tfx_estimate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tfx_results_free(res: *mut TfxResults) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Number of records, or 0 for a NULL handle.
///
/// # Safety
/// `res` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tfx_results_len(res: *const TfxResults) -> usize {
    res.as_ref().map_or(0, |r| r.records.len())
}

/// True when no record failed.
///
/// # Safety
/// `res` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tfx_results_clean(res: *const TfxResults) -> bool {
    res.as_ref().is_some_and(|r| r.clean)
}

/// `name:estimator` of record `index`, owned by the handle; NULL when out of
/// range.
///
/// # Safety
/// `res` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tfx_results_name(res: *const TfxResults, index: usize) -> *const c_char {
    res.as_ref()
        .and_then(|r| r.names.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_results_get(
    res: *const TfxResults,
    index: usize,
    out: *mut TfxEstimate,
) -> TfxStatus {
    guard(|| {
        let res = handle(res, "res")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = res.records.get(index).ok_or_else(|| {
            (
                TfxStatus::OutOfRange,
                format!("record {index} out of range for {}", res.records.len()),
            )
        })?;
        let f = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out = TfxEstimate {
            status: match r.status {
                Status::Ok => TfxRecordStatus::Ok,
                Status::Filtered => TfxRecordStatus::Filtered,
                Status::Failed => TfxRecordStatus::Failed,
            },
            estimate: f(r.estimate),
            std_error: f(r.std_error),
            ci_lower: f(r.ci_lower),
            ci_upper: f(r.ci_upper),
            p_value: f(r.p_value),
            n: r.n.unwrap_or(0),
        };
        Ok(())
    })
}

/// Computes a GRM from an `n × r` row-major dosage matrix. Values must be
/// 0, 1 or 2; any negative value marks a missing call.
///
/// # Safety
/// `dosages` must point to `n * r` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_grm_compute(
    dosages: *const i8,
    n: usize,
    r: usize,
    block: usize,
    out: *mut *mut TfxGrm,
) -> TfxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if dosages.is_null() {
            return Err(null("dosages"));
        }
        let len = n
            .checked_mul(r)
            .ok_or_else(|| (TfxStatus::InvalidArgument, "n * r overflows".to_string()))?;
        let flat = std::slice::from_raw_parts(dosages, len);
        let rows: Vec<Vec<Option<u8>>> = flat
            .chunks(r.max(1))
            .take(n)
            .map(|row| row.iter().map(|&v| u8::try_from(v).ok()).collect())
            .collect();
        let g = lib(Genotypes::from_rows(&rows))?;
        let grm = lib(compute_grm(&g, block.max(1)))?;
        *out = Box::into_raw(Box::new(TfxGrm(grm)));
        Ok(())
    })
}

/// Reads a GRM file written by [`tfx_grm_write`] or the `grm` command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_grm_read(path: *const c_char, out: *mut *mut TfxGrm) -> TfxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let grm = lib(Grm::read(&path))?;
        *out = Box::into_raw(Box::new(TfxGrm(grm)));
        Ok(())
    })
}

/// # Safety
/// `grm` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tfx_grm_write(grm: *const TfxGrm, path: *const c_char) -> TfxStatus {
    guard(|| {
        let grm = handle(grm, "grm")?;
        let path = path_arg(path, "path")?;
        lib(grm.0.write(&path))
    })
}

/// # Safety
/// `grm` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tfx_grm_n(grm: *const TfxGrm) -> usize {
    grm.as_ref().map_or(0, |g| g.0.n())
}

/// # Safety
/// `grm` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_grm_get(
    grm: *const TfxGrm,
    i: usize,
    j: usize,
    out: *mut f64,
) -> TfxStatus {
    guard(|| {
        let grm = handle(grm, "grm")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let n = grm.0.n();
        if i >= n || j >= n {
            return Err((
                TfxStatus::OutOfRange,
                format!("({i}, {j}) out of range for n = {n}"),
            ));
        }
        *out = grm.0.get(i, j);
        Ok(())
    })
}

/// # Safety
/// `grm` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tfx_grm_free(grm: *mut TfxGrm) {
    if !grm.is_null() {
        drop(Box::from_raw(grm));
    }
}

/// Variance curve of an influence vector over `points` thresholds on
/// `[0, tau_max]`. Writes `points` values to `variances` and the plateau
/// value under the max rule to `plateau`.
///
/// # Safety
/// `eif` must point to `tfx_grm_n(grm)` values; `variances` must have room
/// for `points` values; `plateau` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfx_svp_curve(
    eif: *const f64,
    grm: *const TfxGrm,
    points: usize,
    tau_max: f64,
    variances: *mut f64,
    plateau: *mut f64,
) -> TfxStatus {
    guard(|| {
        let grm = handle(grm, "grm")?;
        if eif.is_null() {
            return Err(null("eif"));
        }
        if variances.is_null() {
            return Err(null("variances"));
        }
        let plateau = plateau.as_mut().ok_or_else(|| null("plateau"))?;
        if points == 0 || !(tau_max.is_finite() && tau_max > 0.0) {
            return Err((
                TfxStatus::InvalidArgument,
                "points must be positive and tau_max a positive number".into(),
            ));
        }
        let eif = std::slice::from_raw_parts(eif, grm.0.n());
        let taus = default_grid(points, tau_max);
        let curve = lib(svp_curve(eif, &grm.0, &taus, PlateauRule::Max))?;
        std::slice::from_raw_parts_mut(variances, curve.variances.len())
            .copy_from_slice(&curve.variances);
        *plateau = curve.variance0;
        Ok(())
    })
}
