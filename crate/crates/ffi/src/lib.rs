//! C ABI over the `gjn` toolkit.
//!
//! Objects are opaque handles created by `*_new`/`*_from_*` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`GjnStatus`]; on failure a message is available from
//! [`gjn_last_error_message`] on the same thread until the next failing call.
//! Matrices are passed row-major. Output buffers are caller-allocated and
//! their length is checked against what the call needs.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use gjn::network::{HeavyTrafficSequence, Network, NetworkSpec, RoutingMatrix};
use gjn::rbm::{self, RbmSamplingPlan, RbmSpec};
use gjn::skorohod::{self, Interpolation, Path};
use gjn::Error;
use nalgebra::DMatrix;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GjnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    BufferTooSmall = 4,
    InvalidRouting = 10,
    NonConvergentRouting = 11,
    InvalidDistribution = 12,
    DimensionMismatch = 13,
    DegenerateMember = 14,
    NotCritical = 15,
    Unstable = 16,
    UnstableRbm = 17,
    NoProductForm = 18,
    InvalidCovariance = 19,
    NonConvergence = 20,
    InfeasibleVisits = 21,
    HorizonTooLong = 22,
    NoCertificate = 23,
    ThetaTooLarge = 24,
    InvalidCertificate = 25,
    TailConditionFailed = 26,
    ThresholdBelowK = 27,
    OutOfRegion = 28,
    InvalidArgument = 29,
    Config = 30,
    Io = 31,
    Panic = 99,
}

impl From<&Error> for GjnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidRouting(_) => GjnStatus::InvalidRouting,
            Error::NonConvergentRouting(_) => GjnStatus::NonConvergentRouting,
            Error::InvalidDistribution(_) => GjnStatus::InvalidDistribution,
            Error::DimensionMismatch { .. } => GjnStatus::DimensionMismatch,
            Error::DegenerateMember { .. } => GjnStatus::DegenerateMember,
            Error::NotCritical { .. } => GjnStatus::NotCritical,
            Error::Unstable { .. } => GjnStatus::Unstable,
            Error::UnstableRbm => GjnStatus::UnstableRbm,
            Error::NoProductForm { .. } => GjnStatus::NoProductForm,
            Error::InvalidCovariance(_) => GjnStatus::InvalidCovariance,
            Error::NonConvergence { .. } => GjnStatus::NonConvergence,
            Error::InfeasibleVisits { .. } => GjnStatus::InfeasibleVisits,
            Error::HorizonTooLong(_) => GjnStatus::HorizonTooLong,
            Error::NoCertificate(_) => GjnStatus::NoCertificate,
            Error::ThetaTooLarge { .. } => GjnStatus::ThetaTooLarge,
            Error::InvalidCertificate(_) => GjnStatus::InvalidCertificate,
            Error::TailConditionFailed { .. } => GjnStatus::TailConditionFailed,
            Error::ThresholdBelowK { .. } => GjnStatus::ThresholdBelowK,
            Error::OutOfRegion { .. } => GjnStatus::OutOfRegion,
            Error::InvalidArgument(_) => GjnStatus::InvalidArgument,
            Error::Config(_) => GjnStatus::Config,
            Error::Io(_) => GjnStatus::Io,
        }
    }
}

/// A validated queueing network.
pub struct GjnNetwork {
    net: Network,
}

/// Parameters of a reflected Brownian motion.
pub struct GjnRbm {
    spec: RbmSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GjnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(GjnStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome) -> GjnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GjnStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {message}"));
            GjnStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(GjnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, needed: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len < needed {
        return Err(Failure(
            GjnStatus::BufferTooSmall,
            format!("{what} holds {len} values, {needed} needed"),
        ));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, needed))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failing call on this thread, or null if none.
/// The pointer is valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gjn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn gjn_status_str(status: GjnStatus) -> *const c_char {
    let s: &'static CStr = match status {
        GjnStatus::Ok => c"ok",
        GjnStatus::NullPointer => c"null pointer",
        GjnStatus::InvalidUtf8 => c"invalid utf-8",
        GjnStatus::Parse => c"parse error",
        GjnStatus::BufferTooSmall => c"buffer too small",
        GjnStatus::InvalidRouting => c"invalid routing",
        GjnStatus::NonConvergentRouting => c"non-convergent routing",
        GjnStatus::InvalidDistribution => c"invalid distribution",
        GjnStatus::DimensionMismatch => c"dimension mismatch",
        GjnStatus::DegenerateMember => c"degenerate member",
        GjnStatus::NotCritical => c"not critical",
        GjnStatus::Unstable => c"unstable",
        GjnStatus::UnstableRbm => c"unstable rbm",
        GjnStatus::NoProductForm => c"no product form",
        GjnStatus::InvalidCovariance => c"invalid covariance",
        GjnStatus::NonConvergence => c"non-convergence",
        GjnStatus::InfeasibleVisits => c"infeasible visits",
        GjnStatus::HorizonTooLong => c"horizon too long",
        GjnStatus::NoCertificate => c"no certificate",
        GjnStatus::ThetaTooLarge => c"theta too large",
        GjnStatus::InvalidCertificate => c"invalid certificate",
        GjnStatus::TailConditionFailed => c"tail condition failed",
        GjnStatus::ThresholdBelowK => c"threshold below K",
        GjnStatus::OutOfRegion => c"out of region",
        GjnStatus::InvalidArgument => c"invalid argument",
        GjnStatus::Config => c"config error",
        GjnStatus::Io => c"io error",
        GjnStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Parses a network from TOML with `routing` and `[[stations]]` tables.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gjn_network_from_toml(text: *const c_char, out: *mut *mut GjnNetwork) -> GjnStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|e| Failure(GjnStatus::InvalidUtf8, e.to_string()))?;
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| Failure(GjnStatus::Parse, e.to_string()))?;
        put(out, GjnNetwork { net: spec.validate()? })
    })
}

/// # Safety
/// `net` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gjn_network_free(net: *mut GjnNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gjn_network_num_stations(net: *const GjnNetwork, out: *mut usize) -> GjnStatus {
    guard(|| {
        let net = as_ref(net, "net")?;
        *out.as_mut().ok_or_else(|| null("out"))? = net.net.dim();
        Ok(())
    })
}

/// Total arrival rates and traffic intensities. Either output may be null.
///
/// # Safety
/// Non-null outputs must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gjn_network_traffic(
    net: *const GjnNetwork,
    lambda_out: *mut f64,
    rho_out: *mut f64,
    len: usize,
) -> GjnStatus {
    guard(|| {
        let net = &as_ref(net, "net")?.net;
        let dim = net.dim();
        if !lambda_out.is_null() {
            output(lambda_out, len, dim, "lambda_out")?.copy_from_slice(net.lambda());
        }
        if !rho_out.is_null() {
            output(rho_out, len, dim, "rho_out")?.copy_from_slice(net.rho());
        }
        Ok(())
    })
}

/// Upper bound w'z / min mu_j (1 - rho_j) on the fluid drain time from `z`.
///
/// # Safety
/// `z` must hold `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gjn_drain_time_bound(
    net: *const GjnNetwork,
    z: *const f64,
    len: usize,
    out: *mut f64,
) -> GjnStatus {
    guard(|| {
        let net = &as_ref(net, "net")?.net;
        let z = input(z, len, "z")?;
        let bound = gjn::fluid::drain_time_bound(net, z)?;
        *out.as_mut().ok_or_else(|| null("out"))? = bound;
        Ok(())
    })
}

unsafe fn sequence(net: *const GjnNetwork, kappa0: *const f64, len: usize) -> Result<HeavyTrafficSequence, Failure> {
    let base = as_ref(net, "net")?.net.clone();
    let kappa0 = input(kappa0, len, "kappa0")?.to_vec();
    Ok(HeavyTrafficSequence::new(base, kappa0)?)
}

/// Member `n` of the heavy-traffic sequence over a critically loaded base,
/// with arrival rates scaled by (1 - kappa0_j / sqrt(n)).
///
/// # Safety
/// `kappa0` must hold `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gjn_heavy_traffic_member(
    base: *const GjnNetwork,
    kappa0: *const f64,
    len: usize,
    n: u64,
    out: *mut *mut GjnNetwork,
) -> GjnStatus {
    guard(|| {
        let member = sequence(base, kappa0, len)?.member(n)?;
        put(out, GjnNetwork { net: member })
    })
}

/// Limiting RBM of the heavy-traffic sequence over a critical base.
///
/// # Safety
/// `kappa0` must hold `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_from_heavy_traffic(
    base: *const GjnNetwork,
    kappa0: *const f64,
    len: usize,
    out: *mut *mut GjnRbm,
) -> GjnStatus {
    guard(|| {
        let spec = rbm::rbm_params(&sequence(base, kappa0, len)?)?;
        put(out, GjnRbm { spec })
    })
}

/// RBM from explicit drift, covariance and routing (both `dim` x `dim`).
///
/// # Safety
/// `beta` must hold `dim` doubles, `gamma` and `routing` `dim * dim`.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_new(
    beta: *const f64,
    gamma: *const f64,
    routing: *const f64,
    dim: usize,
    out: *mut *mut GjnRbm,
) -> GjnStatus {
    guard(|| {
        let beta = input(beta, dim, "beta")?.to_vec();
        let gamma = row_major(input(gamma, dim * dim, "gamma")?, dim);
        let routing = RoutingMatrix::from_matrix(row_major(input(routing, dim * dim, "routing")?, dim))?;
        put(
            out,
            GjnRbm {
                spec: RbmSpec::new(beta, gamma, routing)?,
            },
        )
    })
}

fn row_major(values: &[f64], dim: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(dim, dim, values)
}

/// # Safety
/// `rbm` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_free(rbm: *mut GjnRbm) {
    if !rbm.is_null() {
        drop(Box::from_raw(rbm));
    }
}

/// # Safety
/// `rbm` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_dim(rbm: *const GjnRbm, out: *mut usize) -> GjnStatus {
    guard(|| {
        let rbm = as_ref(rbm, "rbm")?;
        *out.as_mut().ok_or_else(|| null("out"))? = rbm.spec.dim();
        Ok(())
    })
}

/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_drift(rbm: *const GjnRbm, out: *mut f64, len: usize) -> GjnStatus {
    guard(|| {
        let spec = &as_ref(rbm, "rbm")?.spec;
        output(out, len, spec.dim(), "out")?.copy_from_slice(spec.beta());
        Ok(())
    })
}

/// Covariance matrix, row-major.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_covariance(rbm: *const GjnRbm, out: *mut f64, len: usize) -> GjnStatus {
    guard(|| {
        let spec = &as_ref(rbm, "rbm")?.spec;
        let d = spec.dim();
        let out = output(out, len, d * d, "out")?;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = spec.gamma()[(i, j)];
            }
        }
        Ok(())
    })
}

/// Exponential rates of the product-form stationary law. Fails with
/// `NoProductForm` when the skew-symmetry condition does not hold.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_product_form_rates(rbm: *const GjnRbm, out: *mut f64, len: usize) -> GjnStatus {
    guard(|| {
        let spec = &as_ref(rbm, "rbm")?.spec;
        let eta = rbm::product_form_rates(spec)?;
        output(out, len, eta.len(), "out")?.copy_from_slice(&eta);
        Ok(())
    })
}

/// Approximately stationary RBM samples with default warmup, spacing and
/// step, written row-major as `n_samples` rows of `dim` values.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gjn_rbm_stationary_sample(
    rbm: *const GjnRbm,
    n_samples: usize,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> GjnStatus {
    guard(|| {
        let spec = &as_ref(rbm, "rbm")?.spec;
        let out = output(out, len, n_samples * spec.dim(), "out")?;
        let plan = RbmSamplingPlan::defaults(spec, n_samples);
        let set = rbm::rbm_stationary_sample(spec, &plan, seed)?;
        for (dst, row) in out.chunks_mut(spec.dim()).zip(&set.rows) {
            dst.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Reflects a piecewise-constant path of `n_points` rows of `dim` values.
/// `y_out` and `q_out` (either may be null) receive the regulator and the
/// reflected path in the same layout.
///
/// # Safety
/// `times` must hold `n_points` doubles, `values` and non-null outputs
/// `n_points * dim`, and `routing` `dim * dim`.
#[no_mangle]
pub unsafe extern "C" fn gjn_reflect(
    times: *const f64,
    values: *const f64,
    n_points: usize,
    dim: usize,
    routing: *const f64,
    y_out: *mut f64,
    q_out: *mut f64,
) -> GjnStatus {
    guard(|| {
        let total = n_points * dim;
        let times = input(times, n_points, "times")?.to_vec();
        let values = input(values, total, "values")?.to_vec();
        let routing = RoutingMatrix::from_matrix(row_major(input(routing, dim * dim, "routing")?, dim))?;
        let path = Path::from_flat(times, values, dim, Interpolation::PiecewiseConstant)?;
        let sol = skorohod::reflect(&path, &routing, skorohod::DEFAULT_TOL)?;
        if !y_out.is_null() {
            output(y_out, total, total, "y_out")?.copy_from_slice(sol.y.values());
        }
        if !q_out.is_null() {
            output(q_out, total, total, "q_out")?.copy_from_slice(sol.q.values());
        }
        Ok(())
    })
}
