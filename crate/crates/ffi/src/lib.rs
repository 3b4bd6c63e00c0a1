//! C ABI over the `mchom` library.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`-style
//! function and released with the matching `*_free`. Every fallible call
//! returns an [`MchomStatus`]; the message of the most recent failure on the
//! calling thread is available from [`mchom_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mchom::cache::Cache;
use mchom::config::RunConfig;
use mchom::pipeline::{build_medium, run_pipeline, Medium, PipelineOutput};
use mchom::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MchomStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    InvalidInput = 4,
    SolverFailure = 5,
    SingularSystem = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> MchomStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Config(_) | Error::NonCommensurate { .. } => MchomStatus::InvalidConfig,
        Error::InvalidGrid(_)
        | Error::InvalidPartition(_)
        | Error::InvalidGeometry(_)
        | Error::InvalidField(_)
        | Error::EmptySupport
        | Error::IncompatibleGrid(..)
        | Error::EmptyContinuum { .. }
        | Error::Missing(_)
        | Error::Format(_) => MchomStatus::InvalidInput,
        Error::NotConverged { .. } | Error::RankDeficient { .. } | Error::Factorization(_) => {
            MchomStatus::SolverFailure
        }
        Error::SingularSystem { .. } => MchomStatus::SingularSystem,
        Error::Io(_) | Error::Csv(_) => MchomStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MchomStatus, String)>) -> MchomStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MchomStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MchomStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MchomStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MchomStatus, String) {
    (MchomStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MchomStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MchomStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_slice<'a>(out: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], (MchomStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err((
            MchomStatus::BufferTooSmall,
            format!("buffer holds {len} values, {need} required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(out, need))
}

/// Resolved run configuration.
pub struct MchomConfig {
    inner: RunConfig,
}

/// Generated coefficient field with its continuum labels.
pub struct MchomMedium {
    inner: Medium,
}

/// Outputs of a complete pipeline run.
pub struct MchomRun {
    inner: PipelineOutput,
}

/// Scalar metrics of a run. Metrics that were not computed are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MchomReport {
    pub h_eps: f64,
    pub h_coarse: f64,
    pub k_layers: usize,
    pub contrast: f64,
    pub nlmc_energy_error: f64,
    pub nlmc_l2_error: f64,
    pub macro_energy_error: f64,
    pub macro_l2_error: f64,
    pub mean_preservation: f64,
    pub identity_discrepancy: f64,
    pub runtime_s: f64,
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mchom_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mchom_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes a handle holding the default configuration to `out`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mchom_config_default(out: *mut *mut MchomConfig) -> MchomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(MchomConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mchom_config_from_toml(text: *const c_char, out: *mut *mut MchomConfig) -> MchomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(text, "text")?;
        let inner = RunConfig::from_toml(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MchomConfig { inner }));
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mchom_config_free(cfg: *mut MchomConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the medium described by `cfg`.
///
/// # Safety
/// `cfg` must be a live configuration handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mchom_medium_generate(cfg: *const MchomConfig, out: *mut *mut MchomMedium) -> MchomStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = build_medium(&cfg.inner).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MchomMedium { inner }));
        Ok(())
    })
}

/// Number of fine cells of the medium, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live medium handle.
#[no_mangle]
pub unsafe extern "C" fn mchom_medium_num_cells(m: *const MchomMedium) -> usize {
    m.as_ref().map_or(0, |m| m.inner.field.values().len())
}

/// `κ_max / κ_min`, or NaN for a null handle.
///
/// # Safety
/// `m` must be null or a live medium handle.
#[no_mangle]
pub unsafe extern "C" fn mchom_medium_contrast(m: *const MchomMedium) -> f64 {
    m.as_ref().map_or(f64::NAN, |m| m.inner.field.contrast())
}

/// Copies the per-cell coefficient (row-major, x fastest) into `out`.
///
/// # Safety
/// `m` must be a live medium handle; `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mchom_medium_coefficients(m: *const MchomMedium, out: *mut f64, len: usize) -> MchomStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("medium"))?;
        let v = m.inner.field.values();
        out_slice(out, len, v.len())?.copy_from_slice(v);
        Ok(())
    })
}

/// Copies the continuum label (0 or 1) of each cell into `out`.
///
/// # Safety
/// `m` must be a live medium handle; `out` must point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mchom_medium_labels(m: *const MchomMedium, out: *mut u8, len: usize) -> MchomStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("medium"))?;
        let v = m.inner.map.labels();
        if out.is_null() {
            return Err(null("output buffer"));
        }
        if len < v.len() {
            return Err((
                MchomStatus::BufferTooSmall,
                format!("buffer holds {len} labels, {} required", v.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, v.len()).copy_from_slice(v);
        Ok(())
    })
}

/// Releases a medium. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mchom_medium_free(m: *mut MchomMedium) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Runs the full pipeline. `cache_dir` may be null to disable caching;
/// `with_macro` nonzero also solves the macroscopic system.
///
/// # Safety
/// `cfg` must be a live configuration handle, `cache_dir` null or a
/// NUL-terminated path, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mchom_run_pipeline(
    cfg: *const MchomConfig,
    cache_dir: *const c_char,
    with_macro: c_int,
    out: *mut *mut MchomRun,
) -> MchomStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cache = if cache_dir.is_null() {
            None
        } else {
            Some(Cache::new(Path::new(str_arg(cache_dir, "cache_dir")?)).map_err(lib_err)?)
        };
        let inner = run_pipeline(&cfg.inner, cache.as_ref(), with_macro != 0).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MchomRun { inner }));
        Ok(())
    })
}

/// Fills `out` with the run's metrics.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mchom_run_report(run: *const MchomRun, out: *mut MchomReport) -> MchomStatus {
    guard(|| {
        let r = &run.as_ref().ok_or_else(|| null("run"))?.inner.row;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = MchomReport {
            h_eps: r.h_eps,
            h_coarse: r.h_coarse,
            k_layers: r.k_layers,
            contrast: r.contrast,
            nlmc_energy_error: r.nlmc_energy_error,
            nlmc_l2_error: r.nlmc_l2_error,
            macro_energy_error: r.macro_energy_error,
            macro_l2_error: r.macro_l2_error,
            mean_preservation: r.mean_preservation,
            identity_discrepancy: r.identity_discrepancy,
            runtime_s: r.runtime_s,
        };
        Ok(())
    })
}

/// Which nodal field [`mchom_run_field`] copies.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MchomField {
    /// Fine reference solution on `(n+1)²` nodes.
    Fine = 0,
    /// Downscaled localized solution on `(n+1)²` nodes.
    Nlmc = 1,
    /// First macroscopic continuum on the coarse nodes.
    Macro0 = 2,
    /// Second macroscopic continuum on the coarse nodes.
    Macro1 = 3,
}

/// Number of values of `field`, or 0 when the run has no such field.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn mchom_run_field_len(run: *const MchomRun, field: MchomField) -> usize {
    run.as_ref().map_or(0, |r| field_values(&r.inner, field).map_or(0, <[f64]>::len))
}

fn field_values(out: &PipelineOutput, field: MchomField) -> Option<&[f64]> {
    match field {
        MchomField::Fine => Some(out.fine.u.values()),
        MchomField::Nlmc => Some(out.nlmc.u_glo.values()),
        MchomField::Macro0 => out.macro_.as_ref().map(|m| m.solution.values[0].as_slice()),
        MchomField::Macro1 => out.macro_.as_ref().map(|m| m.solution.values[1].as_slice()),
    }
}

/// Copies a nodal field (row-major, x fastest) into `out`.
///
/// # Safety
/// `run` must be a live run handle; `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mchom_run_field(
    run: *const MchomRun,
    field: MchomField,
    out: *mut f64,
    len: usize,
) -> MchomStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let v = field_values(&r.inner, field)
            .ok_or_else(|| (MchomStatus::InvalidArgument, "run has no macroscopic solution".to_string()))?;
        out_slice(out, len, v.len())?.copy_from_slice(v);
        Ok(())
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mchom_run_free(run: *mut MchomRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
