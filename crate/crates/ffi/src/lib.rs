//! C ABI over the `mam` crate.
//!
//! Fits are opaque `MamFit` handles created by `mam_fit_new` or
//! `mam_fit_from_json` and released with `mam_fit_free`. Every function
//! returns a `MamStatus`; on failure `mam_last_error` describes the most
//! recent error on the calling thread. Strings returned through out
//! pointers are owned by the caller and released with `mam_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mam::data::{load_csv, ModelConfig};
use mam::glmm::fit_conditional;
use mam::mam::{fit_mam, MamOptions};
use mam::summary::FitSummary;
use mam::MamError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

/// Opaque handle to a fitted marginal additive model.
pub struct MamFit {
    summary: FitSummary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &MamError) -> MamStatus {
    if e.is_numerical() {
        MamStatus::Numerical
    } else if matches!(e, MamError::Io(_)) {
        MamStatus::Io
    } else {
        MamStatus::InvalidInput
    }
}

fn guard(f: impl FnOnce() -> Result<(), MamStatus>) -> MamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MamStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MamStatus::Panic
        }
    }
}

fn fail(e: MamError) -> MamStatus {
    set_error(e.to_string());
    status_of(&e)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MamStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(MamStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        MamStatus::InvalidInput
    })
}

unsafe fn fit_ref<'a>(fit: *const MamFit) -> Result<&'a MamFit, MamStatus> {
    fit.as_ref().ok_or_else(|| {
        set_error("fit handle is null");
        MamStatus::NullPointer
    })
}

fn null_out<T>(p: *mut T, what: &str) -> Result<(), MamStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        Err(MamStatus::NullPointer)
    } else {
        Ok(())
    }
}

/// Message for the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fits a model from a CSV data file and a JSON model configuration.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_new(
    data_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut MamFit,
) -> MamStatus {
    guard(|| {
        null_out(out, "out")?;
        *out = ptr::null_mut();
        let data = str_arg(data_path, "data_path")?;
        let config = str_arg(config_path, "config_path")?;
        let run = || -> mam::Result<FitSummary> {
            let cfg = ModelConfig::from_json_file(Path::new(config))?;
            let spec = cfg.model_spec()?;
            let ds = load_csv(Path::new(data), &cfg.csv_schema())?;
            let fit = fit_conditional(&ds, &spec)?;
            let m = fit_mam(&fit, &MamOptions::default())?;
            Ok(FitSummary::new(&fit, &m, Some(cfg), 0))
        };
        let summary = run().map_err(fail)?;
        *out = Box::into_raw(Box::new(MamFit { summary }));
        Ok(())
    })
}

/// Loads a fit from the JSON artifact written by `mam fit`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_from_json(json: *const c_char, out: *mut *mut MamFit) -> MamStatus {
    guard(|| {
        null_out(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(json, "json")?;
        let summary = FitSummary::from_json(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(MamFit { summary }));
        Ok(())
    })
}

/// Releases a fit handle. Null is ignored.
///
/// # Safety
/// `fit` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_free(fit: *mut MamFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Serializes the fit as JSON into a newly allocated string.
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_summary_json(fit: *const MamFit, out: *mut *mut c_char) -> MamStatus {
    guard(|| {
        null_out(out, "out")?;
        *out = ptr::null_mut();
        let f = fit_ref(fit)?;
        let json = f.summary.to_json().map_err(fail)?;
        let c = CString::new(json).map_err(|_| {
            set_error("summary contains NUL");
            MamStatus::InvalidInput
        })?;
        *out = c.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Number of reportable terms (linear terms first, then smooths).
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_n_terms(fit: *const MamFit, out: *mut usize) -> MamStatus {
    guard(|| {
        null_out(out, "out")?;
        *out = fit_ref(fit)?.summary.term_names.len();
        Ok(())
    })
}

/// Number of covariates expected per row by `mam_fit_marginalize`.
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_n_covariates(fit: *const MamFit, out: *mut usize) -> MamStatus {
    guard(|| {
        null_out(out, "out")?;
        *out = fit_ref(fit)?.summary.structure.p;
        Ok(())
    })
}

/// Marginal curve of term `term` at `n` grid values: estimates and standard
/// errors including the variance-component correction.
///
/// # Safety
/// `grid`, `estimate` and `se` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_marginal_curve(
    fit: *const MamFit,
    term: usize,
    grid: *const f64,
    n: usize,
    estimate: *mut f64,
    se: *mut f64,
) -> MamStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        if n > 0 {
            null_out(grid.cast_mut(), "grid")?;
            null_out(estimate, "estimate")?;
            null_out(se, "se")?;
        }
        let nt = f.summary.term_names.len();
        if term >= nt {
            set_error(format!("term {term} out of range (model has {nt} terms)"));
            return Err(MamStatus::InvalidInput);
        }
        if n == 0 {
            return Ok(());
        }
        let g = std::slice::from_raw_parts(grid, n).to_vec();
        let mut grids = vec![Vec::new(); nt];
        grids[term] = g;
        let curve = f.summary.marginal_curves(&grids).swap_remove(term);
        std::slice::from_raw_parts_mut(estimate, n).copy_from_slice(&curve.estimate);
        std::slice::from_raw_parts_mut(se, n).copy_from_slice(&curve.se);
        Ok(())
    })
}

/// Pseudo-outcomes and marginal predictions at `n` covariate rows given
/// row-major in `rows` (`n` x `p`, `p` = `mam_fit_n_covariates`).
///
/// # Safety
/// `rows` must hold `n * p` doubles; each output must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mam_fit_marginalize(
    fit: *const MamFit,
    rows: *const f64,
    n: usize,
    p: usize,
    lambda_hat: *mut f64,
    estimate: *mut f64,
    se: *mut f64,
) -> MamStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        if p != f.summary.structure.p {
            set_error(format!("rows have {p} columns, model expects {}", f.summary.structure.p));
            return Err(MamStatus::InvalidInput);
        }
        if n == 0 {
            return Ok(());
        }
        null_out(rows.cast_mut(), "rows")?;
        null_out(lambda_hat, "lambda_hat")?;
        null_out(estimate, "estimate")?;
        null_out(se, "se")?;
        let flat = std::slice::from_raw_parts(rows, n * p);
        let rows: Vec<Vec<f64>> = flat.chunks(p.max(1)).map(|c| c.to_vec()).collect();
        let pred = f.summary.marginalize(&rows).map_err(fail)?;
        std::slice::from_raw_parts_mut(lambda_hat, n).copy_from_slice(&pred.lambda_hat);
        std::slice::from_raw_parts_mut(estimate, n).copy_from_slice(&pred.estimate);
        let out = std::slice::from_raw_parts_mut(se, n);
        for i in 0..n {
            out[i] = (pred.var_conditional[i] + pred.var_correction[i]).max(0.0).sqrt();
        }
        Ok(())
    })
}
