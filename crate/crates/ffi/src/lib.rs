//! C ABI for the fbm-tanaka library: an opaque sampler handle, a one-shot
//! term decomposition, and a weighted-local-time evaluator.
//!
//! Conventions:
//! - Every fallible call returns an [`FtStatus`]; zero is success.
//! - On failure the call stores a thread-local message readable through
//!   [`ft_last_error_message`]. The pointer stays valid until the next
//!   failing call on the same thread.
//! - Out-parameters are written only when the call returns success.
//! - Handles from `_new` functions are released exactly once with the
//!   matching `_free`; passing null to `_free` is a no-op.
//! - Panics never cross the boundary; they are caught and reported as
//!   [`FtStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fbm_tanaka::fbm::{FbmSampler, HurstParam, SampleMethod, TimeGrid};
use fbm_tanaka::malliavin::derivative_field_exact;
use fbm_tanaka::mollify::MollifierIndex;
use fbm_tanaka::quad::KernelWeights;
use fbm_tanaka::sde::{solve, DossModel, ModelSpec};
use fbm_tanaka::tanaka::{
    decomposition_terms, mollified_identity_residual, tanaka_residual, weighted_local_time_fbm,
    Convention, LevelX,
};
use fbm_tanaka::Error;

/// Status code of every fallible call. Zero means success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument failed validation (Hurst range, grid shape, buffer
    /// length, unknown enum value, ...).
    InvalidArgument = 2,
    /// The computation failed numerically (embedding spectrum, solver
    /// divergence, root bracketing).
    Numerical = 3,
    /// A panic was caught at the boundary.
    Panic = 4,
}

/// Model selector for the one-shot entry points. `nu` is read only for
/// `Fou`; `Doss` is the built-in sine model `sigma(x) = 2 + sin x`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtModelKind {
    Fbm = 0,
    Fou = 1,
    Doss = 2,
}

/// Terms of the decomposition of `|X_t - x|` for one path, one level, one
/// mollifier index, one argument convention. Field meanings match the
/// library's term table: `skorokhod = rs_total - trace_sigma_prime -
/// trace_local`, `residual_tchange` is the smoothed-identity residual
/// (pure discretization error), and `residual_tf` is the sign-formula
/// residual (it estimates the Skorokhod integral).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtTanakaTerms {
    pub abs_increment: f64,
    pub drift: f64,
    pub drift_sgn: f64,
    pub rs_total: f64,
    pub trace_sigma_prime: f64,
    pub trace_sigma_prime_sgn: f64,
    pub trace_local: f64,
    pub skorokhod: f64,
    pub residual_tchange: f64,
    pub residual_tf: f64,
}

/// Opaque fBm sampler over a fixed grid, Hurst parameter, and seed. Paths
/// are addressed by index: equal `(seed, path_index)` always reproduces
/// the same values, at any thread count.
pub struct FtSampler {
    inner: FbmSampler,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: FtStatus, message: &str) -> FtStatus {
    let owned = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
    status
}

fn classify(e: &Error) -> FtStatus {
    match e {
        Error::NegativeSpectrum { .. }
        | Error::NonFiniteState { .. }
        | Error::ExponentOverflow { .. }
        | Error::BracketFailure { .. }
        | Error::PathFailure { .. } => FtStatus::Numerical,
        _ => FtStatus::InvalidArgument,
    }
}

fn fail_with(e: &Error) -> FtStatus {
    fail(classify(e), &e.to_string())
}

/// Catches panics so they surface as a status code instead of unwinding
/// into the caller's frames.
fn guarded<F: FnOnce() -> FtStatus>(f: F) -> FtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(FtStatus::Panic, "panic caught at the C boundary"),
    }
}

/// Message of the most recent failure on this thread, NUL-terminated.
/// Never null; empty before the first failure. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Creates a sampler for fBm on `[0, horizon]` with `steps` uniform steps.
/// On success writes the new handle to `out`.
///
/// # Safety
///
/// `out` must be null or valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn ft_sampler_new(
    hurst: f64,
    horizon: f64,
    steps: usize,
    seed: u64,
    out: *mut *mut FtSampler,
) -> FtStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FtStatus::NullPointer, "out handle pointer is null");
        }
        let built = HurstParam::new(hurst)
            .and_then(|h| Ok((h, TimeGrid::new(horizon, steps)?)))
            .and_then(|(h, g)| FbmSampler::new(g, h, seed, SampleMethod::default()));
        match built {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(FtSampler { inner })) };
                FtStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Releases a sampler handle. Null is ignored.
///
/// # Safety
///
/// `sampler` must be null or a handle from [`ft_sampler_new`] that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn ft_sampler_free(sampler: *mut FtSampler) {
    if !sampler.is_null() {
        drop(unsafe { Box::from_raw(sampler) });
    }
}

/// Number of values per sampled path (`steps + 1` grid nodes, including
/// `t = 0`). Returns 0 for a null handle.
///
/// # Safety
///
/// `sampler` must be null or a live handle from [`ft_sampler_new`].
#[no_mangle]
pub unsafe extern "C" fn ft_sampler_path_len(sampler: *const FtSampler) -> usize {
    if sampler.is_null() {
        return 0;
    }
    unsafe { &*sampler }.inner.grid().num_nodes()
}

/// Samples the path with the given index into `out_values`, which must
/// hold exactly `ft_sampler_path_len` values.
///
/// # Safety
///
/// `sampler` must be null or a live handle from [`ft_sampler_new`], and
/// `out_values` must be null or valid for writing `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ft_sampler_sample(
    sampler: *const FtSampler,
    path_index: u64,
    out_values: *mut f64,
    len: usize,
) -> FtStatus {
    guarded(|| {
        if sampler.is_null() || out_values.is_null() {
            return fail(FtStatus::NullPointer, "sampler or output buffer is null");
        }
        let sampler = unsafe { &*sampler };
        let need = sampler.inner.grid().num_nodes();
        if len != need {
            return fail(
                FtStatus::InvalidArgument,
                &format!("buffer holds {len} values, the path has {need}"),
            );
        }
        let path = sampler.inner.sample_path(path_index);
        unsafe { std::ptr::copy_nonoverlapping(path.values().as_ptr(), out_values, need) };
        FtStatus::Ok
    })
}

fn model_of(kind: FtModelKind, nu: f64) -> Result<ModelSpec, Error> {
    match kind {
        FtModelKind::Fbm => Ok(ModelSpec::Fbm),
        FtModelKind::Fou => {
            if !(nu.is_finite() && nu != 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "fOU volatility nu = {nu} must be finite and nonzero"
                )));
            }
            Ok(ModelSpec::Fou { nu })
        }
        FtModelKind::Doss => Ok(ModelSpec::Doss(DossModel::sine())),
    }
}

/// One-shot decomposition: samples the driver path `(seed, path_index)`,
/// solves the model from `x0`, and fills `out` with every term at the
/// given level and mollifier index. `argument_at_r` selects the trace
/// convention (false: argument at `s`; true: argument at `r`).
///
/// # Safety
///
/// `out` must be null or valid for writing one [`FtTanakaTerms`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ft_tanaka_terms(
    model: FtModelKind,
    nu: f64,
    hurst: f64,
    horizon: f64,
    steps: usize,
    seed: u64,
    path_index: u64,
    x0: f64,
    level: f64,
    mollifier_n: u64,
    argument_at_r: bool,
    out: *mut FtTanakaTerms,
) -> FtStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FtStatus::NullPointer, "out terms pointer is null");
        }
        let run = || -> Result<FtTanakaTerms, Error> {
            let h = HurstParam::new(hurst)?;
            let grid = TimeGrid::new(horizon, steps)?;
            let spec = model_of(model, nu)?;
            let sampler = FbmSampler::new(grid, h, seed, SampleMethod::default())?;
            let driver = sampler.sample_path(path_index);
            let x = solve(&spec, x0, &driver)?;
            let d = derivative_field_exact(&spec, &x)?;
            let weights = KernelWeights::new(grid, h)?;
            let n = MollifierIndex::new(mollifier_n)?;
            let convention = if argument_at_r {
                Convention::ArgumentAtR
            } else {
                Convention::ArgumentAtS
            };
            let coeffs = spec.coefficients();
            let terms = decomposition_terms(
                &x,
                &d,
                &coeffs,
                LevelX::new(level)?,
                n,
                &driver,
                &weights,
                convention,
            )?;
            Ok(FtTanakaTerms {
                abs_increment: terms.abs_increment,
                drift: terms.drift,
                drift_sgn: terms.drift_sgn,
                rs_total: terms.rs_total,
                trace_sigma_prime: terms.trace_sigma_prime,
                trace_sigma_prime_sgn: terms.trace_sigma_prime_sgn,
                trace_local: terms.trace_local,
                skorokhod: terms.skorokhod,
                residual_tchange: mollified_identity_residual(&terms, &x, n),
                residual_tf: tanaka_residual(&terms, &x),
            })
        };
        match run() {
            Ok(terms) => {
                unsafe { *out = terms };
                FtStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Weighted local time of one fBm path at `level`:
/// `2H sum_i rho_{1/n}(B_{t_i} - level) t_i^{2H-1} dt`.
///
/// # Safety
///
/// `out` must be null or valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn ft_weighted_local_time(
    hurst: f64,
    horizon: f64,
    steps: usize,
    seed: u64,
    path_index: u64,
    level: f64,
    mollifier_n: u64,
    out: *mut f64,
) -> FtStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FtStatus::NullPointer, "out value pointer is null");
        }
        let run = || -> Result<f64, Error> {
            let h = HurstParam::new(hurst)?;
            let grid = TimeGrid::new(horizon, steps)?;
            let sampler = FbmSampler::new(grid, h, seed, SampleMethod::default())?;
            let path = sampler.sample_path(path_index);
            Ok(weighted_local_time_fbm(
                &path,
                h,
                LevelX::new(level)?,
                MollifierIndex::new(mollifier_n)?,
            ))
        };
        match run() {
            Ok(value) => {
                unsafe { *out = value };
                FtStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CStr;
    use std::ptr;

    fn last_message() -> String {
        unsafe { CStr::from_ptr(ft_last_error_message()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn sampler_round_trip_is_deterministic() {
        let mut handle: *mut FtSampler = ptr::null_mut();
        let status = unsafe { ft_sampler_new(0.75, 1.0, 64, 42, &mut handle) };
        assert_eq!(status, FtStatus::Ok);
        let len = unsafe { ft_sampler_path_len(handle) };
        assert_eq!(len, 65);

        let mut a = vec![0.0f64; len];
        let mut b = vec![0.0f64; len];
        assert_eq!(
            unsafe { ft_sampler_sample(handle, 7, a.as_mut_ptr(), len) },
            FtStatus::Ok
        );
        assert_eq!(
            unsafe { ft_sampler_sample(handle, 7, b.as_mut_ptr(), len) },
            FtStatus::Ok
        );
        assert_eq!(a, b);
        assert_eq!(a[0], 0.0);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(a.iter().any(|&v| v != 0.0));
        unsafe { ft_sampler_free(handle) };
    }

    #[test]
    fn sampler_rejects_bad_arguments_with_messages() {
        let mut handle: *mut FtSampler = ptr::null_mut();
        let status = unsafe { ft_sampler_new(0.4, 1.0, 64, 1, &mut handle) };
        assert_eq!(status, FtStatus::InvalidArgument);
        assert!(last_message().contains("hurst"));

        let status = unsafe { ft_sampler_new(0.75, 1.0, 64, 1, ptr::null_mut()) };
        assert_eq!(status, FtStatus::NullPointer);

        assert_eq!(
            unsafe { ft_sampler_new(0.75, 1.0, 64, 1, &mut handle) },
            FtStatus::Ok
        );
        let mut short = vec![0.0f64; 3];
        let status = unsafe { ft_sampler_sample(handle, 0, short.as_mut_ptr(), short.len()) };
        assert_eq!(status, FtStatus::InvalidArgument);
        assert!(last_message().contains("65"));
        unsafe { ft_sampler_free(handle) };
        unsafe { ft_sampler_free(ptr::null_mut()) };
    }

    #[test]
    fn tanaka_terms_satisfy_internal_identities() {
        let mut terms = FtTanakaTerms {
            abs_increment: 0.0,
            drift: 0.0,
            drift_sgn: 0.0,
            rs_total: 0.0,
            trace_sigma_prime: 0.0,
            trace_sigma_prime_sgn: 0.0,
            trace_local: 0.0,
            skorokhod: 0.0,
            residual_tchange: 0.0,
            residual_tf: 0.0,
        };
        let status = unsafe {
            ft_tanaka_terms(
                FtModelKind::Fou,
                1.0,
                0.75,
                1.0,
                256,
                42,
                3,
                0.1,
                0.0,
                16,
                false,
                &mut terms,
            )
        };
        assert_eq!(status, FtStatus::Ok);
        let recomposed = terms.rs_total - terms.trace_sigma_prime - terms.trace_local;
        assert!((terms.skorokhod - recomposed).abs() < 1e-12);
        let residual =
            terms.abs_increment - terms.drift_sgn - terms.trace_sigma_prime_sgn - terms.trace_local;
        assert!((terms.residual_tf - residual).abs() < 1e-12);
        assert!(terms.trace_local > 0.0);
        assert!(terms.residual_tchange.abs() < 0.1);
    }

    #[test]
    fn tanaka_terms_match_the_library_direct_path() {
        let h = HurstParam::new(0.75).unwrap();
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let sampler = FbmSampler::new(grid, h, 9, SampleMethod::default()).unwrap();
        let driver = sampler.sample_path(5);
        let spec = ModelSpec::Doss(DossModel::sine());
        let x = solve(&spec, 0.2, &driver).unwrap();
        let d = derivative_field_exact(&spec, &x).unwrap();
        let weights = KernelWeights::new(grid, h).unwrap();
        let expected = decomposition_terms(
            &x,
            &d,
            &spec.coefficients(),
            LevelX::new(0.0).unwrap(),
            MollifierIndex::new(16).unwrap(),
            &driver,
            &weights,
            Convention::ArgumentAtR,
        )
        .unwrap();

        let mut terms = FtTanakaTerms {
            abs_increment: 0.0,
            drift: 0.0,
            drift_sgn: 0.0,
            rs_total: 0.0,
            trace_sigma_prime: 0.0,
            trace_sigma_prime_sgn: 0.0,
            trace_local: 0.0,
            skorokhod: 0.0,
            residual_tchange: 0.0,
            residual_tf: 0.0,
        };
        let status = unsafe {
            ft_tanaka_terms(
                FtModelKind::Doss,
                0.0,
                0.75,
                1.0,
                128,
                9,
                5,
                0.2,
                0.0,
                16,
                true,
                &mut terms,
            )
        };
        assert_eq!(status, FtStatus::Ok);
        assert_eq!(terms.abs_increment, expected.abs_increment);
        assert_eq!(terms.rs_total, expected.rs_total);
        assert_eq!(terms.trace_local, expected.trace_local);
        assert_eq!(terms.skorokhod, expected.skorokhod);
    }

    #[test]
    fn weighted_local_time_is_finite_positive_and_deterministic() {
        let mut a = 0.0f64;
        let mut b = 0.0f64;
        for slot in [&mut a, &mut b] {
            let status = unsafe { ft_weighted_local_time(0.75, 1.0, 512, 42, 11, 0.0, 64, slot) };
            assert_eq!(status, FtStatus::Ok);
        }
        assert_eq!(a, b);
        assert!(a.is_finite() && a >= 0.0);

        let status = unsafe { ft_weighted_local_time(1.2, 1.0, 512, 42, 11, 0.0, 64, &mut a) };
        assert_eq!(status, FtStatus::InvalidArgument);
        assert!(!last_message().is_empty());
    }

    #[test]
    fn fou_requires_a_usable_volatility() {
        let mut terms = FtTanakaTerms {
            abs_increment: 0.0,
            drift: 0.0,
            drift_sgn: 0.0,
            rs_total: 0.0,
            trace_sigma_prime: 0.0,
            trace_sigma_prime_sgn: 0.0,
            trace_local: 0.0,
            skorokhod: 0.0,
            residual_tchange: 0.0,
            residual_tf: 0.0,
        };
        let status = unsafe {
            ft_tanaka_terms(
                FtModelKind::Fou,
                0.0,
                0.75,
                1.0,
                64,
                1,
                0,
                0.0,
                0.0,
                16,
                false,
                &mut terms,
            )
        };
        assert_eq!(status, FtStatus::InvalidArgument);
        assert!(last_message().contains("nu"));
    }
}
