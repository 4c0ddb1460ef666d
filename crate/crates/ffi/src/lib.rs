//! C interface to the ibpcat library.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns an
//! [`IbpStatus`]; on failure [`ibp_last_error`] describes the problem. Panics
//! never unwind into C: they are caught and reported as `IBP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ibpcat::gibbs::{run_chain, ChainTrace, GibbsConfig};
use ibpcat::laplace::total_log_marginal;
use ibpcat::vi::{binarize, run_vi, Initialization, Schedule, VariationalRun};
use ibpcat::{Error, Hyperparams, LatentFeatureState, ObservationMatrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IbpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Parse = 4,
    Io = 5,
    NotConverged = 6,
    Numerical = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> IbpStatus {
    match err {
        Error::Dimension(_) => IbpStatus::Dimension,
        Error::InvalidArgument(_) | Error::Config(_) => IbpStatus::InvalidArgument,
        Error::Parse { .. } | Error::Json(_) => IbpStatus::Parse,
        Error::Io(_) => IbpStatus::Io,
        Error::NotConverged { .. } => IbpStatus::NotConverged,
        Error::NonFinite(_) | Error::Degenerate { .. } | Error::BoundDecreased { .. } => IbpStatus::Numerical,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard<F>(f: F) -> IbpStatus
where
    F: FnOnce() -> Result<(), (IbpStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IbpStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("panic: {message}"));
            IbpStatus::Panic
        }
    }
}

fn lib<T>(r: ibpcat::Result<T>) -> Result<T, (IbpStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (IbpStatus, String) {
    (IbpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> (IbpStatus, String) {
    (IbpStatus::InvalidArgument, message.into())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (IbpStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (IbpStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (IbpStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn copy_out<T: Copy>(src: &[T], dst: &mut [T]) -> Result<(), (IbpStatus, String)> {
    if dst.len() != src.len() {
        return Err((
            IbpStatus::Dimension,
            format!("buffer holds {} values, {} required", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failure on this thread, or null. The string stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ibp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Categorical observations, N rows by D dimensions.
pub struct IbpDataset(ObservationMatrix);

/// Binary feature matrix Z.
pub struct IbpFeatures(LatentFeatureState);

/// Completed Gibbs chain.
pub struct IbpGibbsResult(ChainTrace);

/// Completed variational run.
pub struct IbpViResult(VariationalRun);

/// Builds a dataset from row-major 1-based categories.
///
/// # Safety
/// `cardinalities` must point to `n_cols` values and `data` to
/// `n_rows * n_cols` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_dataset_new(
    n_rows: usize,
    n_cols: usize,
    cardinalities: *const usize,
    data: *const u32,
    out: *mut *mut IbpDataset,
) -> IbpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cards = slice(cardinalities, n_cols, "cardinalities")?.to_vec();
        let len = n_rows.checked_mul(n_cols).ok_or_else(|| invalid("n_rows * n_cols overflows"))?;
        let values = slice(data, len, "data")?;
        let x = lib(ObservationMatrix::from_one_based(n_rows, cards, values))?;
        *out = Box::into_raw(Box::new(IbpDataset(x)));
        Ok(())
    })
}

/// Reads a dataset CSV (`R:` header, 1-based categories).
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_dataset_load(path: *const c_char, out: *mut *mut IbpDataset) -> IbpStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let x = lib(ibpcat::io::load_dataset(Path::new(path)))?;
        *out = Box::into_raw(Box::new(IbpDataset(x)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ibp_dataset_n_rows(dataset: *const IbpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.n_rows())
}

/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ibp_dataset_n_cols(dataset: *const IbpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.n_cols())
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ibp_dataset_free(dataset: *mut IbpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Builds Z from row-major 0/1 entries.
///
/// # Safety
/// `entries` must point to `n_rows * k` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_features_new(
    n_rows: usize,
    k: usize,
    entries: *const u8,
    out: *mut *mut IbpFeatures,
) -> IbpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n_rows.checked_mul(k).ok_or_else(|| invalid("n_rows * k overflows"))?;
        let values = slice(entries, len, "entries")?;
        if values.iter().any(|&v| v > 1) {
            return Err(invalid("entries must be 0 or 1"));
        }
        let z = lib(LatentFeatureState::from_rows(n_rows, k, values))?;
        *out = Box::into_raw(Box::new(IbpFeatures(z)));
        Ok(())
    })
}

/// # Safety
/// `features` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ibp_features_n_rows(features: *const IbpFeatures) -> usize {
    features.as_ref().map_or(0, |z| z.0.n_rows())
}

/// Number of feature columns.
///
/// # Safety
/// `features` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ibp_features_k(features: *const IbpFeatures) -> usize {
    features.as_ref().map_or(0, |z| z.0.k_active())
}

/// Copies Z row-major into `buffer`, which must hold exactly N·K bytes.
///
/// # Safety
/// `buffer` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ibp_features_copy(features: *const IbpFeatures, buffer: *mut u8, len: usize) -> IbpStatus {
    guard(|| {
        let z = handle(features, "features")?;
        copy_out(&z.0.to_rows(), slice_mut(buffer, len, "buffer")?)
    })
}

/// # Safety
/// `features` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ibp_features_free(features: *mut IbpFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Σ_d log p(x_·d | Z) under the Laplace approximation.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_log_marginal(
    dataset: *const IbpDataset,
    features: *const IbpFeatures,
    sigma_b_sq: f64,
    out: *mut f64,
) -> IbpStatus {
    guard(|| {
        let x = handle(dataset, "dataset")?;
        let z = handle(features, "features")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let hyper = lib(Hyperparams::new(1.0, sigma_b_sq, 0))?;
        *out = lib(total_log_marginal(&x.0, &z.0, &hyper))?;
        Ok(())
    })
}

/// Settings of [`ibp_gibbs_run`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IbpGibbsConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub k_init: usize,
    pub p_init: f64,
    pub alpha: f64,
    pub sigma_b_sq: f64,
    pub seed: u64,
    /// Upper bound on the number of features; 0 means unbounded.
    pub max_features: usize,
}

/// Settings of the image experiment with the given seed.
#[no_mangle]
pub extern "C" fn ibp_gibbs_config_default(seed: u64) -> IbpGibbsConfig {
    let c = GibbsConfig::image_defaults(seed);
    IbpGibbsConfig {
        n_iterations: c.n_iterations,
        burn_in: c.burn_in,
        k_init: c.k_init,
        p_init: c.p_init,
        alpha: c.hyper.alpha,
        sigma_b_sq: c.hyper.sigma_b_sq,
        seed,
        max_features: 0,
    }
}

/// Runs the collapsed Gibbs sampler.
///
/// # Safety
/// `dataset` and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_gibbs_run(
    dataset: *const IbpDataset,
    config: *const IbpGibbsConfig,
    out: *mut *mut IbpGibbsResult,
) -> IbpStatus {
    guard(|| {
        let x = handle(dataset, "dataset")?;
        let c = *handle(config, "config")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut g = GibbsConfig::image_defaults(c.seed);
        g.n_iterations = c.n_iterations;
        g.burn_in = c.burn_in;
        g.k_init = c.k_init;
        g.p_init = c.p_init;
        g.hyper = Hyperparams {
            alpha: c.alpha,
            sigma_b_sq: c.sigma_b_sq,
            seed: c.seed,
        };
        g.max_features = (c.max_features > 0).then_some(c.max_features);
        let trace = lib(run_chain(&x.0, &g))?;
        *out = Box::into_raw(Box::new(IbpGibbsResult(trace)));
        Ok(())
    })
}

/// Number of recorded sweeps.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ibp_gibbs_n_iterations(result: *const IbpGibbsResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.k_active.len())
}

/// Copies K₊ and Σ_d log p(x_·d | Z) after every sweep; both buffers must
/// hold exactly [`ibp_gibbs_n_iterations`] values.
///
/// # Safety
/// Buffers must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ibp_gibbs_trace(
    result: *const IbpGibbsResult,
    k_active: *mut usize,
    log_marginal: *mut f64,
    len: usize,
) -> IbpStatus {
    guard(|| {
        let r = handle(result, "result")?;
        copy_out(&r.0.k_active, slice_mut(k_active, len, "k_active")?)?;
        copy_out(&r.0.log_marginal, slice_mut(log_marginal, len, "log_marginal")?)
    })
}

/// Final Z of the chain as a new handle.
///
/// # Safety
/// `result` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_gibbs_final_features(
    result: *const IbpGibbsResult,
    out: *mut *mut IbpFeatures,
) -> IbpStatus {
    guard(|| {
        let r = handle(result, "result")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(IbpFeatures(r.0.final_z.clone())));
        Ok(())
    })
}

/// # Safety
/// `result` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ibp_gibbs_result_free(result: *mut IbpGibbsResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Settings of [`ibp_vi_run`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IbpViConfig {
    pub truncation: usize,
    pub alpha: f64,
    pub sigma_b_sq: f64,
    pub seed: u64,
    pub max_cycles: usize,
    pub tolerance: f64,
}

/// Runs variational inference from a random start.
///
/// # Safety
/// `dataset` and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_vi_run(
    dataset: *const IbpDataset,
    config: *const IbpViConfig,
    out: *mut *mut IbpViResult,
) -> IbpStatus {
    guard(|| {
        let x = handle(dataset, "dataset")?;
        let c = *handle(config, "config")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if c.truncation == 0 {
            return Err(invalid("truncation must be >= 1"));
        }
        let hyper = lib(Hyperparams::new(c.alpha, c.sigma_b_sq, c.seed))?;
        let schedule = Schedule {
            max_cycles: c.max_cycles,
            tolerance: c.tolerance,
        };
        let run = lib(run_vi(&x.0, c.truncation, &hyper, Initialization::Random, &schedule))?;
        *out = Box::into_raw(Box::new(IbpViResult(run)));
        Ok(())
    })
}

/// Length of the bound trace (initial bound plus one entry per cycle).
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ibp_vi_bound_len(result: *const IbpViResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.bound_trace.len())
}

/// # Safety
/// `bounds` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ibp_vi_bounds(result: *const IbpViResult, bounds: *mut f64, len: usize) -> IbpStatus {
    guard(|| {
        let r = handle(result, "result")?;
        copy_out(&r.0.bound_trace, slice_mut(bounds, len, "bounds")?)
    })
}

/// Copies ν row-major (N × truncation).
///
/// # Safety
/// `nu` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ibp_vi_nu(result: *const IbpViResult, nu: *mut f64, len: usize) -> IbpStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let s = &r.0.state;
        let values: Vec<f64> = (0..s.n_rows()).flat_map(|n| s.nu_row(n).to_vec()).collect();
        copy_out(&values, slice_mut(nu, len, "nu")?)
    })
}

/// Z with z_nk = 1 iff ν_nk > threshold.
///
/// # Safety
/// `result` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ibp_vi_binarize(
    result: *const IbpViResult,
    threshold: f64,
    out: *mut *mut IbpFeatures,
) -> IbpStatus {
    guard(|| {
        let r = handle(result, "result")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(IbpFeatures(binarize(&r.0.state, threshold))));
        Ok(())
    })
}

/// # Safety
/// `result` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ibp_vi_result_free(result: *mut IbpViResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
