//! C ABI for interpolant-lab.
//!
//! Objects are opaque handles created by `il_*_new`-style functions and
//! released with the matching `il_*_free`. Every function returns an
//! [`IlStatus`]; on failure a message is available from
//! [`il_last_error_message`] on the calling thread until the next call.
//! Handles may be shared across threads for reading.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::sync::Arc;

use interpolant_lab::diagnostics::{g_function_for_optimizer, GFunction};
use interpolant_lab::drift::{bimodal_drift, gaussian_drift, spectral_norm, transfer_drift, DriftOracle};
use interpolant_lab::dynamics::{integrate_ode, IntegratorConfig, Method};
use interpolant_lab::schedule::{solve_optimal_schedule, Schedule, ScheduleSpec};
use interpolant_lab::targets::{BimodalGmmTarget, GaussianTarget, Target};
use interpolant_lab::{batch::SampleBatch, Error};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Oracle = 4,
    Contract = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

/// Integration methods for [`il_drift_integrate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlMethod {
    Euler = 0,
    Heun = 1,
    Rk4 = 2,
}

/// Schedule values at one time.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IlScheduleState {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
    /// Optimal diffusion coefficient `alpha^2 (beta_dot/beta - alpha_dot/alpha)`.
    pub epsilon: f64,
}

/// Opaque interpolation schedule.
pub struct IlSchedule {
    inner: Schedule,
}

/// Opaque drift field `b_t(x)`.
pub struct IlDrift {
    inner: Arc<dyn DriftOracle>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IlStatus {
    match e {
        Error::Domain { .. } => IlStatus::Domain,
        Error::Parameter(_) | Error::Parse(_) | Error::Shape(_) => IlStatus::InvalidArgument,
        Error::Oracle(_) => IlStatus::Oracle,
        Error::Contract(_) => IlStatus::Contract,
        Error::Io(_) => IlStatus::Io,
        _ => IlStatus::Numerical,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> IlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IlStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            IlStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            IlStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice_in<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn il_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn il_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a schedule from a description such as `"trig"`,
/// `"designed-gaussian:0.01"` or `"dilated:1:5"`.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn il_schedule_new(spec: *const c_char, out: *mut *mut IlSchedule) -> IlStatus {
    guard(|| {
        if spec.is_null() {
            return Err(Fail::Null("spec"));
        }
        let text = CStr::from_ptr(spec)
            .to_str()
            .map_err(|_| Error::Parse("schedule description is not UTF-8".into()))?;
        let inner = text.parse::<ScheduleSpec>()?.build()?;
        write_out(out, IlSchedule { inner })
    })
}

/// Solves for the schedule minimizing the averaged Lipschitz objective of a
/// 1D Gaussian target of the given variance, tabulated on `grid` nodes.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn il_schedule_optimized_gaussian(
    variance: f64,
    k: u32,
    grid: usize,
    out: *mut *mut IlSchedule,
) -> IlStatus {
    guard(|| {
        let target = Target::Gaussian(GaussianTarget::scalar(variance)?);
        let g: GFunction = g_function_for_optimizer(&target, None, k, 1, 0)?;
        let table = solve_optimal_schedule(g.as_fn(), k, grid, g.weight_mode())?;
        write_out(
            out,
            IlSchedule {
                inner: Schedule::tabulated(table),
            },
        )
    })
}

/// Releases a schedule. NULL is ignored.
///
/// # Safety
/// `schedule` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn il_schedule_free(schedule: *mut IlSchedule) {
    if !schedule.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(schedule))));
    }
}

/// Evaluates the schedule at `t` in `[0, 1]`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn il_schedule_eval(schedule: *const IlSchedule, t: f64, out: *mut IlScheduleState) -> IlStatus {
    guard(|| {
        let s = deref(schedule, "schedule")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let st = s.inner.eval(t)?;
        *out = IlScheduleState {
            alpha: st.alpha,
            beta: st.beta,
            alpha_dot: st.alpha_dot,
            beta_dot: st.beta_dot,
            epsilon: st.optimal_epsilon(),
        };
        Ok(())
    })
}

/// Closed-form drift of a Gaussian target with the given covariance
/// eigenvalues (coordinate basis).
///
/// # Safety
/// `eigenvalues` must hold `d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_drift_gaussian(
    schedule: *const IlSchedule,
    eigenvalues: *const f64,
    d: usize,
    out: *mut *mut IlDrift,
) -> IlStatus {
    guard(|| {
        let s = deref(schedule, "schedule")?;
        let ev = slice_in(eigenvalues, d, "eigenvalues")?;
        let g = GaussianTarget::diagonal(ev.to_vec())?;
        write_out(
            out,
            IlDrift {
                inner: Arc::new(gaussian_drift(&s.inner, &g)),
            },
        )
    })
}

/// Closed-form drift of `p N(r, I) + (1 - p) N(-r, I)` under a
/// variance-preserving schedule.
///
/// # Safety
/// `r` must hold `d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_drift_bimodal(
    schedule: *const IlSchedule,
    r: *const f64,
    d: usize,
    p: f64,
    out: *mut *mut IlDrift,
) -> IlStatus {
    guard(|| {
        let s = deref(schedule, "schedule")?;
        let r = slice_in(r, d, "r")?;
        let t = BimodalGmmTarget::new(r.to_vec(), p)?;
        write_out(
            out,
            IlDrift {
                inner: Arc::new(bimodal_drift(&s.inner, &t)?),
            },
        )
    })
}

/// Converts a drift learned under the linear schedule into the drift of
/// `schedule`. `reference` stays owned by the caller.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_drift_transfer(
    reference: *const IlDrift,
    schedule: *const IlSchedule,
    out: *mut *mut IlDrift,
) -> IlStatus {
    guard(|| {
        let r = deref(reference, "reference")?;
        let s = deref(schedule, "schedule")?;
        write_out(
            out,
            IlDrift {
                inner: Arc::new(transfer_drift(Arc::clone(&r.inner), &s.inner)?),
            },
        )
    })
}

/// Releases a drift. NULL is ignored.
///
/// # Safety
/// `drift` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn il_drift_free(drift: *mut IlDrift) {
    if !drift.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(drift))));
    }
}

/// State dimension of the drift, 0 for NULL.
///
/// # Safety
/// `drift` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn il_drift_dim(drift: *const IlDrift) -> usize {
    drift.as_ref().map_or(0, |d| d.inner.dim())
}

fn check_dim(drift: &IlDrift, d: usize) -> Result<(), Fail> {
    if drift.inner.dim() == d {
        Ok(())
    } else {
        Err(Error::Shape(format!("drift has dimension {}, got {d}", drift.inner.dim())).into())
    }
}

/// Writes `b_t(x)` into `out`; `x` and `out` hold `d` values each.
///
/// # Safety
/// Pointers must be valid for `d` values.
#[no_mangle]
pub unsafe extern "C" fn il_drift_eval(
    drift: *const IlDrift,
    t: f64,
    x: *const f64,
    d: usize,
    out: *mut f64,
) -> IlStatus {
    guard(|| {
        let dr = deref(drift, "drift")?;
        check_dim(dr, d)?;
        let x = slice_in(x, d, "x")?;
        let o = slice_out(out, d, "out")?;
        dr.inner.eval(t, x, o)?;
        Ok(())
    })
}

/// Spectral norm of the drift Jacobian at `(t, x)`.
///
/// # Safety
/// `x` must hold `d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_drift_jacobian_norm(
    drift: *const IlDrift,
    t: f64,
    x: *const f64,
    d: usize,
    out: *mut f64,
) -> IlStatus {
    guard(|| {
        let dr = deref(drift, "drift")?;
        check_dim(dr, d)?;
        let x = slice_in(x, d, "x")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = spectral_norm(dr.inner.as_ref(), t, x)?;
        Ok(())
    })
}

/// Integrates `n` row-major states of dimension `d` in place from `t_min`
/// to `t_max` with `steps` fixed steps.
///
/// # Safety
/// `states` must hold `n * d` values.
#[no_mangle]
pub unsafe extern "C" fn il_drift_integrate(
    drift: *const IlDrift,
    method: IlMethod,
    steps: usize,
    t_min: f64,
    t_max: f64,
    states: *mut f64,
    n: usize,
    d: usize,
) -> IlStatus {
    guard(|| {
        let dr = deref(drift, "drift")?;
        check_dim(dr, d)?;
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("{n} x {d} states overflow")))?;
        let data = slice_out(states, len, "states")?;
        let method = match method {
            IlMethod::Euler => Method::Euler,
            IlMethod::Heun => Method::Heun,
            IlMethod::Rk4 => Method::Rk4,
        };
        let config = IntegratorConfig {
            method,
            steps,
            t_min,
            t_max,
            store_trajectory: false,
        };
        let initial = SampleBatch::from_vec(n, d, data.to_vec(), t_min, 0)?;
        let result = integrate_ode(dr.inner.as_ref(), &initial, &config)?;
        data.copy_from_slice(result.batch.as_slice());
        Ok(())
    })
}
