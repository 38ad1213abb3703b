use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode surfaced by the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid routing matrix: {0}")]
    InvalidRouting(String),

    #[error("routing matrix has spectral radius >= 1: {0}")]
    NonConvergentRouting(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("heavy-traffic member n={n} is degenerate: {reason}")]
    DegenerateMember { n: u64, reason: String },

    #[error("base network is not critically loaded: max |lambda - mu| = {max_gap:e}")]
    NotCritical { max_gap: f64 },

    #[error("network is unstable (bottleneck intensity {rho_max})")]
    Unstable { rho_max: f64 },

    #[error("RBM is unstable: [I - P']^-1 beta is not strictly negative")]
    UnstableRbm,

    #[error("skew symmetry fails (relative Frobenius residual {relative:e})")]
    NoProductForm {
        /// 2 Gamma - ([I - P'] D^-1 Lambda + Lambda D^-1 [I - P]), row-major.
        residual: Vec<Vec<f64>>,
        relative: f64,
    },

    #[error("invalid covariance matrix: {0}")]
    InvalidCovariance(String),

    #[error("reflection fixed point did not converge after {iterations} iterations (change {change:e})")]
    NonConvergence { iterations: usize, change: f64 },

    #[error("visit vector {visits:?} is infeasible from station {station}: {reason}")]
    InfeasibleVisits {
        station: usize,
        visits: Vec<u32>,
        reason: String,
    },

    #[error("simulation exceeded its event budget of {0} events")]
    HorizonTooLong(u64),

    #[error("no drift certificate: {0}")]
    NoCertificate(String),

    #[error("theta too large: {overflow_fraction} of exponential moments overflowed")]
    ThetaTooLarge { overflow_fraction: f64 },

    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),

    #[error("condition theta * L2 <= gamma violated: theta * L2 = {lhs}, gamma = {gamma}")]
    TailConditionFailed { lhs: f64, gamma: f64 },

    #[error("threshold s = {s} must exceed the exception level K = {k}")]
    ThresholdBelowK { s: f64, k: f64 },

    #[error("probe state outside the drift region: w'z = {workload} <= c0 sqrt(n) = {limit}")]
    OutOfRegion { workload: f64, limit: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
