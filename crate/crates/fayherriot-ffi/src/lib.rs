//! C ABI for the fayherriot toolkit.
//!
//! Conventions:
//! * Datasets are opaque handles created by [`fh_dataset_new`] and released
//!   by [`fh_dataset_free`].
//! * Every fallible call returns an [`FhStatus`]; on failure a thread-local
//!   message is available through [`fh_last_error_message`] (free it with
//!   [`fh_string_free`]).
//! * Output arrays are caller-allocated with length `m` (the number of
//!   areas); null output pointers skip that output.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use libc::c_char;

use fayherriot::bayes::{posterior_summary, BayesOptions};
use fayherriot::cli::{MethodChoice, PriorChoice};
use fayherriot::estimators::fit;
use fayherriot::likelihood::check_propriety;
use fayherriot::model::AreaLevelDataset;
use fayherriot::mse::{bootstrap_mse, taylor_mse, BootstrapConfig};
use fayherriot::nerm::{adjustment_gradient, NermDesign, Psi};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericError = 3,
    ImproperPosterior = 4,
    Singular = 5,
    Panic = 6,
}

/// Estimation method selector for `fh_fit`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhMethod {
    Ml = 0,
    Reml = 1,
    /// Power adjustment; pass the exponent as `power_s`.
    AdjPower = 2,
    MultiGoal = 3,
}

/// Prior selector for `fh_posterior_summary`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhPrior {
    Flat = 0,
    MultiGoal = 1,
    /// General multi-goal prior built from a power adjustment; pass the
    /// exponent as `power_s`.
    GeneralMg = 2,
    GaneshLahiriUniform = 3,
}

/// Posterior summaries for one area.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FhPosteriorSummary {
    pub e_b: f64,
    pub v_b: f64,
    pub e_theta: f64,
    pub v_theta: f64,
    pub node_count: u64,
    pub a_lo: f64,
    pub a_hi: f64,
}

/// Opaque dataset handle.
pub struct FhDataset {
    inner: AreaLevelDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message)
        .unwrap_or_else(|_| CString::new("error message contained NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn status_of(err: &fayherriot::Error) -> FhStatus {
    use fayherriot::Error::*;
    match err {
        InvalidDataset(_) | Domain(_) | Config(_) | CsvFormat { .. } => FhStatus::InvalidArgument,
        Singular { .. } => FhStatus::Singular,
        ImproperPosterior { .. } => FhStatus::ImproperPosterior,
        _ => FhStatus::NumericError,
    }
}

fn fail(err: fayherriot::Error) -> FhStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guarded(body: impl FnOnce() -> FhStatus + std::panic::UnwindSafe) -> FhStatus {
    match catch_unwind(body) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic".into());
            FhStatus::Panic
        }
    }
}

/// Library version as a static nul-terminated string; do not free.
#[no_mangle]
pub extern "C" fn fh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// The last error message raised on this thread, or null. The caller owns
/// the returned string and must release it with `fh_string_free`.
#[no_mangle]
pub extern "C" fn fh_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned by
/// `fh_last_error_message`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fh_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a dataset from caller arrays: `y` and `d` of length `m`, `x` in
/// row-major order with `m * p` entries, and optionally `area_ids` as `m`
/// nul-terminated strings (null for generated ids). Returns null on error.
///
/// # Safety
/// The array pointers must be valid for the stated lengths; `area_ids`,
/// when non-null, must point to `m` valid C strings.
#[no_mangle]
pub unsafe extern "C" fn fh_dataset_new(
    m: usize,
    p: usize,
    y: *const f64,
    d: *const f64,
    x: *const f64,
    area_ids: *const *const c_char,
) -> *mut FhDataset {
    if y.is_null() || d.is_null() || x.is_null() || m == 0 || p == 0 {
        set_error("fh_dataset_new: null array or zero dimension".into());
        return std::ptr::null_mut();
    }
    let y = std::slice::from_raw_parts(y, m).to_vec();
    let d = std::slice::from_raw_parts(d, m).to_vec();
    let x = std::slice::from_raw_parts(x, m * p).to_vec();
    let ids: Vec<String> = if area_ids.is_null() {
        (0..m).map(|i| format!("area{i:04}")).collect()
    } else {
        let ptrs = std::slice::from_raw_parts(area_ids, m);
        let mut ids = Vec::with_capacity(m);
        for (i, &ptr) in ptrs.iter().enumerate() {
            if ptr.is_null() {
                set_error(format!("fh_dataset_new: area_ids[{i}] is null"));
                return std::ptr::null_mut();
            }
            match CStr::from_ptr(ptr).to_str() {
                Ok(s) => ids.push(s.to_string()),
                Err(_) => {
                    set_error(format!("fh_dataset_new: area_ids[{i}] is not UTF-8"));
                    return std::ptr::null_mut();
                }
            }
        }
        ids
    };
    match AreaLevelDataset::new(ids, y, d, x, p) {
        Ok(inner) => Box::into_raw(Box::new(FhDataset { inner })),
        Err(err) => {
            set_error(err.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Releases a dataset handle.
///
/// # Safety
/// `ds` must be null or a pointer from `fh_dataset_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fh_dataset_free(ds: *mut FhDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of areas in the dataset (0 for null).
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fh_dataset_m(ds: *const FhDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).inner.m()
    }
}

unsafe fn write_out(ptr: *mut f64, idx: usize, value: f64) {
    if !ptr.is_null() {
        *ptr.add(idx) = value;
    }
}

/// Fits the variance component under `method` and fills per-area arrays
/// (each of length `m`, each optional): the variance-component estimate,
/// the shrinkage factor and the EBLUP.
///
/// # Safety
/// `ds` must be a live dataset handle; each non-null output must point to
/// `m` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fh_fit(
    ds: *const FhDataset,
    method: FhMethod,
    power_s: f64,
    out_a_hat: *mut f64,
    out_b_hat: *mut f64,
    out_theta_hat: *mut f64,
) -> FhStatus {
    if ds.is_null() {
        set_error("fh_fit: null dataset".into());
        return FhStatus::NullPointer;
    }
    let data = &(*ds).inner;
    guarded(AssertUnwindSafe(|| {
        let choice = match method {
            FhMethod::Ml => MethodChoice::Ml,
            FhMethod::Reml => MethodChoice::Reml,
            FhMethod::AdjPower => MethodChoice::AdjPower { s: power_s },
            FhMethod::MultiGoal => MethodChoice::Mg,
        };
        if matches!(choice, MethodChoice::AdjPower { s } if !(s > 0.0)) {
            set_error("fh_fit: power_s must be positive for AdjPower".into());
            return FhStatus::InvalidArgument;
        }
        match fit(data, &choice.to_fit_method()) {
            Ok(result) => {
                for (i, area) in result.areas.iter().enumerate() {
                    write_out(out_a_hat, i, area.a_hat);
                    write_out(out_b_hat, i, area.b_hat);
                    write_out(out_theta_hat, i, area.theta_hat);
                }
                FhStatus::Ok
            }
            Err(err) => fail(err),
        }
    }))
}

/// Taylor-series MSE of the multi-goal EBLUP, one value per area.
///
/// # Safety
/// `ds` must be a live dataset handle; `out_mse` must point to `m`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fh_taylor_mse(ds: *const FhDataset, out_mse: *mut f64) -> FhStatus {
    if ds.is_null() || out_mse.is_null() {
        set_error("fh_taylor_mse: null pointer".into());
        return FhStatus::NullPointer;
    }
    let data = &(*ds).inner;
    guarded(AssertUnwindSafe(|| {
        let result = match fit(data, &MethodChoice::Mg.to_fit_method()) {
            Ok(r) => r,
            Err(err) => return fail(err),
        };
        for i in 0..data.m() {
            match taylor_mse(data, &result, i) {
                Ok(v) => write_out(out_mse, i, v),
                Err(err) => return fail(err),
            }
        }
        FhStatus::Ok
    }))
}

/// Posterior summaries of `(B_i, theta_i)` for one area. `power_s` is the
/// exponent for `GeneralMg` and ignored otherwise; `quad_tol <= 0` selects
/// the default quadrature tolerance.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` a writable summary struct.
#[no_mangle]
pub unsafe extern "C" fn fh_posterior_summary(
    ds: *const FhDataset,
    prior: FhPrior,
    power_s: f64,
    area: usize,
    quad_tol: f64,
    out: *mut FhPosteriorSummary,
) -> FhStatus {
    if ds.is_null() || out.is_null() {
        set_error("fh_posterior_summary: null pointer".into());
        return FhStatus::NullPointer;
    }
    let data = &(*ds).inner;
    guarded(AssertUnwindSafe(|| {
        let choice = match prior {
            FhPrior::Flat => PriorChoice::Flat,
            FhPrior::MultiGoal => PriorChoice::Mg,
            FhPrior::GeneralMg => PriorChoice::GeneralMg { s: power_s },
            FhPrior::GaneshLahiriUniform => PriorChoice::GaneshLahiri { weights: None },
        };
        let spec = match choice.to_prior_spec(data) {
            Ok(s) => s,
            Err(err) => return fail(err),
        };
        let mut opts = BayesOptions::default();
        if quad_tol > 0.0 {
            opts.rel_tol = quad_tol;
        }
        match posterior_summary(data, &spec, area, &opts) {
            Ok(s) => {
                *out = FhPosteriorSummary {
                    e_b: s.e_b,
                    v_b: s.v_b,
                    e_theta: s.e_theta,
                    v_theta: s.v_theta,
                    node_count: s.diagnostics.node_count as u64,
                    a_lo: s.diagnostics.truncation_points.0,
                    a_hi: s.diagnostics.truncation_points.1,
                };
                FhStatus::Ok
            }
            Err(err) => fail(err),
        }
    }))
}

/// Single parametric bootstrap MSE of the multi-goal EBLUP. Fills the
/// per-area estimates and, optionally, their Monte Carlo standard errors.
///
/// # Safety
/// `ds` must be a live dataset handle; `out_estimate` (and `out_stderr`
/// when non-null) must point to `m` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fh_bootstrap_mse(
    ds: *const FhDataset,
    replicates: usize,
    seed: u64,
    out_estimate: *mut f64,
    out_stderr: *mut f64,
) -> FhStatus {
    if ds.is_null() || out_estimate.is_null() {
        set_error("fh_bootstrap_mse: null pointer".into());
        return FhStatus::NullPointer;
    }
    let data = &(*ds).inner;
    guarded(AssertUnwindSafe(|| {
        let result = match fit(data, &MethodChoice::Mg.to_fit_method()) {
            Ok(r) => r,
            Err(err) => return fail(err),
        };
        let cfg = BootstrapConfig::new(seed).with_replicates(replicates);
        match bootstrap_mse(data, &result, &cfg) {
            Ok(boot) => {
                for (i, est) in boot.per_area.iter().enumerate() {
                    write_out(out_estimate, i, est.estimate);
                    write_out(out_stderr, i, est.mc_stderr.unwrap_or(f64::NAN));
                }
                FhStatus::Ok
            }
            Err(err) => fail(err),
        }
    }))
}

/// Posterior-propriety flags for the power adjustment `(A + D_i)^s`: used
/// raw as a prior, and wrapped in the general multi-goal prior. Flags are
/// written as 0/1.
///
/// # Safety
/// Non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_check_propriety(
    s: f64,
    m: usize,
    p: usize,
    out_proper_raw: *mut i32,
    out_proper_general_mg: *mut i32,
) -> FhStatus {
    if m <= p || p == 0 {
        set_error("fh_check_propriety: requires m > p >= 1".into());
        return FhStatus::InvalidArgument;
    }
    let flags = check_propriety(s, m, p);
    if !out_proper_raw.is_null() {
        *out_proper_raw = flags.proper_as_raw_adjustment as i32;
    }
    if !out_proper_general_mg.is_null() {
        *out_proper_general_mg = flags.proper_as_general_mg_prior as i32;
    }
    FhStatus::Ok
}

/// Adjustment-factor gradient for the nested error regression model along
/// direction `(k_v, k_e)`; writes the two components to `out_grad`.
///
/// # Safety
/// `n` must point to `m` unit counts; `out_grad` to two writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fh_nerm_adjustment_gradient(
    n: *const u64,
    m: usize,
    sigma_v2: f64,
    sigma_e2: f64,
    area: usize,
    k_v: f64,
    k_e: f64,
    out_grad: *mut f64,
) -> FhStatus {
    if n.is_null() || out_grad.is_null() {
        set_error("fh_nerm_adjustment_gradient: null pointer".into());
        return FhStatus::NullPointer;
    }
    let n = std::slice::from_raw_parts(n, m).to_vec();
    guarded(AssertUnwindSafe(|| {
        let design = match NermDesign::new(n.clone()) {
            Ok(d) => d,
            Err(err) => return fail(err),
        };
        let psi = match Psi::new(sigma_v2, sigma_e2) {
            Ok(p) => p,
            Err(err) => return fail(err),
        };
        match adjustment_gradient(&design, &psi, area, [k_v, k_e]) {
            Ok(g) => {
                *out_grad = g[0];
                *out_grad.add(1) = g[1];
                FhStatus::Ok
            }
            Err(err) => fail(err),
        }
    }))
}
