//! C interface to the clear-sky fitter.
//!
//! Matrices cross the boundary column-major (one day after another), matching
//! the order of the underlying time series. Every fallible call returns an
//! [`ScsfStatus`]; on failure, [`scsf_last_error`] describes what went wrong.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use scsf_core::{fit, FitConfig, LowRankModel, PowerMatrix, ScsfError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidConfig = 2,
    Size = 3,
    Numeric = 4,
    Degenerate = 5,
    Io = 6,
    ModelFormat = 7,
    Panic = 8,
}

/// Opaque fitted model.
pub struct ScsfModel {
    model: LowRankModel,
    converged: Option<bool>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn status_of(e: &ScsfError) -> ScsfStatus {
    match e {
        ScsfError::Config(_) => ScsfStatus::InvalidConfig,
        ScsfError::Size(_) => ScsfStatus::Size,
        ScsfError::Numeric(_) => ScsfStatus::Numeric,
        ScsfError::Degenerate(_) => ScsfStatus::Degenerate,
        ScsfError::ModelFormat(_) => ScsfStatus::ModelFormat,
        _ => ScsfStatus::Io,
    }
}

fn fail(status: ScsfStatus, message: impl Into<String>) -> ScsfStatus {
    set_error(message.into());
    status
}

fn guarded(body: impl FnOnce() -> Result<(), (ScsfStatus, String)>) -> ScsfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => ScsfStatus::Ok,
        Ok(Err((status, message))) => fail(status, message),
        Err(_) => fail(ScsfStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: ScsfError) -> (ScsfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (ScsfStatus, String) {
    (ScsfStatus::NullArgument, format!("{name} is null"))
}

unsafe fn text_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (ScsfStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (ScsfStatus::InvalidConfig, format!("{name} is not UTF-8")))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scsf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Fit a model to an `m × n` power matrix.
///
/// `observed` may be null (everything observed); otherwise nonzero bytes mark
/// observed samples. `config_toml` may be null for the built-in defaults or
/// hold TOML keys that override them. On success `*out` owns a model that
/// must be released with [`scsf_model_free`].
///
/// # Safety
/// `data` must point to `m·n` doubles, `observed` (when non-null) to `m·n`
/// bytes, `config_toml` (when non-null) to a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scsf_fit(
    data: *const f64,
    observed: *const u8,
    m: usize,
    n: usize,
    config_toml: *const c_char,
    out: *mut *mut ScsfModel,
) -> ScsfStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if data.is_null() {
            return Err(null("data"));
        }
        let len = m.checked_mul(n).filter(|&l| l > 0).ok_or((ScsfStatus::Size, format!("bad shape {m}×{n}")))?;
        let values = DMatrix::from_column_slice(m, n, std::slice::from_raw_parts(data, len));
        let mask = if observed.is_null() {
            DMatrix::from_element(m, n, true)
        } else {
            let bytes = std::slice::from_raw_parts(observed, len);
            DMatrix::from_iterator(m, n, bytes.iter().map(|&b| b != 0))
        };
        let config = if config_toml.is_null() {
            FitConfig::default()
        } else {
            FitConfig::overlay(text_arg(config_toml, "config_toml")?).map_err(lib_err)?
        };
        config.validate().map_err(lib_err)?;
        let (model, report) = fit(&PowerMatrix::from_parts(values, mask), &config).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(ScsfModel { model, converged: Some(report.converged) }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scsf_model_free(model: *mut ScsfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn scsf_model_dims(model: *const ScsfModel, m: *mut usize, n: *mut usize, k: *mut usize) -> ScsfStatus {
    guarded(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        for (p, v) in [(m, model.m()), (n, model.n()), (k, model.k())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copy the clear-sky estimate (column-major, `m·n` values) into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn scsf_model_clear_sky(model: *const ScsfModel, out: *mut f64, len: usize) -> ScsfStatus {
    guarded(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        let estimate = model.clear_sky();
        if len != estimate.len() {
            return Err((ScsfStatus::Size, format!("buffer holds {len} values, estimate has {}", estimate.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(estimate.as_slice());
        Ok(())
    })
}

/// Year-over-year offset `β` and the matching annual degradation rate.
/// `*present` is set to 0 for records of one year or less, in which case the
/// other outputs are left untouched.
///
/// # Safety
/// `model` must be a live handle; `present` must be valid, `beta` and `rate`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn scsf_model_beta(model: *const ScsfModel, present: *mut u8, beta: *mut f64, rate: *mut f64) -> ScsfStatus {
    guarded(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if present.is_null() {
            return Err(null("present"));
        }
        *present = u8::from(model.beta.is_some());
        if let Some(b) = model.beta {
            if !beta.is_null() {
                *beta = b;
            }
            if !rate.is_null() {
                *rate = model.degradation_rate().unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// 1 if the outer loop met its tolerance, 0 if it hit the iteration cap, -1
/// for models loaded from disk.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scsf_model_converged(model: *const ScsfModel) -> i32 {
    match model.as_ref().and_then(|h| h.converged) {
        Some(true) => 1,
        Some(false) => 0,
        None => -1,
    }
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scsf_model_save(model: *const ScsfModel, path: *const c_char) -> ScsfStatus {
    guarded(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let path = text_arg(path, "path")?;
        let io = |e: std::io::Error| (ScsfStatus::Io, format!("{path}: {e}"));
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        model.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scsf_model_load(path: *const c_char, out: *mut *mut ScsfModel) -> ScsfStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = text_arg(path, "path")?;
        let file = File::open(path).map_err(|e| (ScsfStatus::Io, format!("{path}: {e}")))?;
        let model = LowRankModel::read_from(BufReader::new(file)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(ScsfModel { model, converged: None }));
        Ok(())
    })
}
