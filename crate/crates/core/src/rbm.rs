//! Reflected Brownian motion on the orthant with reflection matrix I - P'.
//!
//! Parameters come either from a heavy-traffic sequence (drift and
//! covariance of the limiting diffusion) or directly from (beta, Gamma, P).
//! Paths are built by reflecting a discretized Brownian motion whose
//! per-interval coordinate minima are drawn from the Brownian-bridge law,
//! so the reflection sees excursions between grid points.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{HeavyTrafficSequence, Network, RoutingMatrix};
use crate::samples::{SampleKind, SampleMetadata, StationarySampleSet};
use crate::sim::replication_seed;
use crate::skorohod::{self, Interpolation, Path, ReflectionSolution};

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_FLOOR: f64 = -1e-10;
pub const SKEW_SYMMETRY_TOL: f64 = 1e-9;
/// Longest stretch of grid points reflected in one solver call.
const CHUNK_POINTS: usize = 20_000;

/// Raw serializable form of the RBM parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub routing: RoutingMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
}

/// Validated RBM parameters with stability and product-form diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RbmParams", into = "RbmParams")]
pub struct RbmSpec {
    beta: Vec<f64>,
    gamma: DMatrix<f64>,
    routing: RoutingMatrix,
    kappa: Option<Vec<f64>>,
    mu: Option<Vec<f64>>,
    factor: DMatrix<f64>,
    stable: bool,
    skew_residual: DMatrix<f64>,
    skew_relative: f64,
    eta: Option<Vec<f64>>,
}

impl TryFrom<RbmParams> for RbmSpec {
    type Error = Error;

    fn try_from(p: RbmParams) -> Result<Self> {
        let dim = p.beta.len();
        if p.gamma.len() != dim || p.gamma.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidCovariance(format!("covariance must be {dim} x {dim}")));
        }
        let gamma = DMatrix::from_fn(dim, dim, |i, j| p.gamma[i][j]);
        let mut spec = RbmSpec::new(p.beta, gamma, p.routing)?;
        if let (Some(kappa), Some(mu)) = (p.kappa, p.mu) {
            spec = spec.with_kappa(kappa, mu)?;
        }
        Ok(spec)
    }
}

impl From<RbmSpec> for RbmParams {
    fn from(s: RbmSpec) -> Self {
        let dim = s.dim();
        RbmParams {
            gamma: (0..dim).map(|i| (0..dim).map(|j| s.gamma[(i, j)]).collect()).collect(),
            beta: s.beta,
            routing: s.routing,
            kappa: s.kappa,
            mu: s.mu,
        }
    }
}

impl RbmSpec {
    pub fn new(beta: Vec<f64>, gamma: DMatrix<f64>, routing: RoutingMatrix) -> Result<Self> {
        let dim = beta.len();
        if dim == 0 || gamma.nrows() != dim || gamma.ncols() != dim {
            return Err(Error::InvalidCovariance(format!("covariance must be {dim} x {dim}")));
        }
        if routing.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: routing.dim(),
            });
        }
        if beta.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("RBM parameters must be finite".to_string()));
        }
        let factor = covariance_factor(&gamma)?;
        let inv = routing.reflection_inverse()?;
        let pushed = &inv * DVector::from_column_slice(&beta);
        let stable = pushed.iter().all(|&v| v < 0.0);
        let (skew_residual, skew_relative) = skew_symmetry_residual(&gamma, &routing);
        let mut spec = RbmSpec {
            beta,
            gamma,
            routing,
            kappa: None,
            mu: None,
            factor,
            stable,
            skew_residual,
            skew_relative,
            eta: None,
        };
        if spec.stable && spec.is_skew_symmetric() {
            spec.eta = Some(spec.eta_from_drift());
        }
        Ok(spec)
    }

    /// Attaches the heavy-traffic constants kappa and service rates mu.
    pub fn with_kappa(mut self, kappa: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        if kappa.len() != self.dim() || mu.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: kappa.len().min(mu.len()),
            });
        }
        self.kappa = Some(kappa);
        self.mu = Some(mu);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn routing(&self) -> &RoutingMatrix {
        &self.routing
    }

    pub fn kappa(&self) -> Option<&[f64]> {
        self.kappa.as_deref()
    }

    pub fn mu(&self) -> Option<&[f64]> {
        self.mu.as_deref()
    }

    /// [I - P']^-1 beta < 0 componentwise.
    pub fn is_stable(&self) -> bool {
        self.stable
    }

    pub fn is_skew_symmetric(&self) -> bool {
        self.skew_relative <= SKEW_SYMMETRY_TOL
    }

    /// 2 Gamma - ([I - P'] D^-1 Lambda + Lambda D^-1 [I - P]).
    pub fn skew_residual(&self) -> &DMatrix<f64> {
        &self.skew_residual
    }

    /// Frobenius norm of the residual relative to that of 2 Gamma.
    pub fn skew_relative_error(&self) -> f64 {
        self.skew_relative
    }

    pub fn eta(&self) -> Option<&[f64]> {
        self.eta.as_deref()
    }

    /// [I - P']^-1 beta.
    pub fn pushed_drift(&self) -> Vec<f64> {
        let inv = self.routing.reflection_inverse().expect("validated routing");
        (inv * DVector::from_column_slice(&self.beta)).iter().copied().collect()
    }

    /// -2 Lambda^-1 D [I - P']^-1 beta.
    fn eta_from_drift(&self) -> Vec<f64> {
        let pushed = self.pushed_drift();
        (0..self.dim())
            .map(|j| -2.0 * (1.0 - self.routing.get(j, j)) * pushed[j] / self.gamma[(j, j)])
            .collect()
    }

    /// 2 Gamma_jj^-1 (1 - p_jj) mu_j kappa_j, when kappa is known.
    pub fn eta_from_kappa(&self) -> Option<Vec<f64>> {
        let (kappa, mu) = (self.kappa.as_ref()?, self.mu.as_ref()?);
        Some(
            (0..self.dim())
                .map(|j| 2.0 * (1.0 - self.routing.get(j, j)) * mu[j] * kappa[j] / self.gamma[(j, j)])
                .collect(),
        )
    }

    pub fn params(&self) -> RbmParams {
        self.clone().into()
    }

    /// Drift time scale: 1 / min_j |([I - P']^-1 beta)_j|.
    pub fn drift_scale(&self) -> f64 {
        1.0 / self
            .pushed_drift()
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// 0.01 times the drift time scale.
    pub fn default_step(&self) -> f64 {
        0.01 * self.drift_scale()
    }

    /// Relaxation time 2 max_j Gamma_jj x (drift time scale)^2.
    pub fn relaxation_time(&self) -> f64 {
        let g = (0..self.dim()).map(|j| self.gamma[(j, j)]).fold(0.0, f64::max);
        (2.0 * g * self.drift_scale().powi(2)).max(self.drift_scale())
    }
}

/// Limiting covariance of the centered free process:
/// Gamma_kl = sum_j mu_j [p_jk (d_kl - p_jl) + cs2_j (p_jk - d_jk)(p_jl - d_jl)] + alpha_k ca2_k d_kl.
pub fn limit_covariance(net: &Network) -> DMatrix<f64> {
    let dim = net.dim();
    let p = |j: usize, k: usize| net.routing().get(j, k);
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    DMatrix::from_fn(dim, dim, |k, l| {
        let mut g = net.alpha()[k] * net.ca2()[k] * d(k, l);
        for j in 0..dim {
            g += net.mu()[j]
                * (p(j, k) * (d(k, l) - p(j, l)) + net.cs2()[j] * (p(j, k) - d(j, k)) * (p(j, l) - d(j, l)));
        }
        g
    })
}

pub fn skew_symmetry_residual(gamma: &DMatrix<f64>, routing: &RoutingMatrix) -> (DMatrix<f64>, f64) {
    let dim = gamma.nrows();
    let r = routing.reflection();
    // D^-1 Lambda: diag(Gamma_jj / (1 - p_jj)).
    let scale = DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            gamma[(j, j)] / (1.0 - routing.get(j, j))
        } else {
            0.0
        }
    });
    let rhs = &r * &scale + &scale * r.transpose();
    let residual = gamma * 2.0 - rhs;
    let denom = (gamma * 2.0).norm();
    let relative = if denom > 0.0 {
        residual.norm() / denom
    } else {
        residual.norm()
    };
    (residual, relative)
}

/// Symmetric square root V diag(sqrt(lambda)) V' of a PSD covariance.
fn covariance_factor(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = (gamma - gamma.transpose()).abs().max();
    if asym > SYMMETRY_TOL * gamma.abs().max().max(1.0) {
        return Err(Error::InvalidCovariance(format!(
            "covariance is not symmetric (gap {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(gamma.clone());
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&v| v < EIGEN_FLOOR) {
        return Err(Error::InvalidCovariance(format!(
            "covariance has negative eigenvalue {bad:e}"
        )));
    }
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

/// Drift and covariance of the diffusion limit of a heavy-traffic sequence:
/// beta = -[I - P'] M^-1 kappa with M = diag(1 / mu), Gamma from the primitives.
pub fn rbm_params(seq: &HeavyTrafficSequence) -> Result<RbmSpec> {
    let net = seq.base();
    let dim = net.dim();
    let r = net.routing().reflection();
    let scaled = DVector::from_iterator(dim, (0..dim).map(|j| net.mu()[j] * seq.kappa()[j]));
    let beta: Vec<f64> = (-(r * scaled)).iter().copied().collect();
    RbmSpec::new(beta, limit_covariance(net), net.routing().clone())?
        .with_kappa(seq.kappa().to_vec(), net.mu().to_vec())
}

/// Product-form exponential rates eta of the stationary law.
pub fn product_form_rates(spec: &RbmSpec) -> Result<Vec<f64>> {
    if !spec.is_stable() {
        return Err(Error::UnstableRbm);
    }
    if !spec.is_skew_symmetric() {
        let r = spec.skew_residual();
        return Err(Error::NoProductForm {
            residual: (0..r.nrows()).map(|i| r.row(i).iter().copied().collect()).collect(),
            relative: spec.skew_relative_error(),
        });
    }
    let eta = spec.eta_from_drift();
    if let Some(alt) = spec.eta_from_kappa() {
        for (a, b) in eta.iter().zip(&alt) {
            if (a - b).abs() > 1e-10 * a.abs().max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "rates from drift {eta:?} disagree with rates from kappa {alt:?}"
                )));
            }
        }
    }
    Ok(eta)
}

/// Brownian increments on `times` starting at `z0`, plus the Brownian-bridge
/// minimum of each coordinate over each interval.
fn brownian_segment<R: Rng>(spec: &RbmSpec, z0: &[f64], times: &[f64], rng: &mut R) -> Result<Path> {
    let dim = spec.dim();
    let n = times.len();
    let mut values = Vec::with_capacity(n * dim);
    let mut minima = Vec::with_capacity(n * dim);
    values.extend_from_slice(z0);
    minima.extend_from_slice(z0);
    let mut noise = DVector::zeros(dim);
    for i in 1..n {
        let h = times[i] - times[i - 1];
        let sh = h.sqrt();
        for v in noise.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let shock = &spec.factor * &noise;
        for j in 0..dim {
            let a = values[(i - 1) * dim + j];
            let b = a + spec.beta[j] * h + shock[j] * sh;
            values.push(b);
            let var = spec.gamma[(j, j)] * h;
            let u: f64 = rng.random();
            let m = if var > 0.0 {
                let gap = b - a;
                0.5 * (a + b - (gap * gap - 2.0 * var * (1.0 - u).ln()).sqrt())
            } else {
                a.min(b)
            };
            minima.push(m);
        }
    }
    Path::from_flat(times.to_vec(), values, dim, Interpolation::PiecewiseLinear)?.with_interval_minima(minima)
}

fn check_start(spec: &RbmSpec, z0: &[f64]) -> Result<()> {
    if z0.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            actual: z0.len(),
        });
    }
    if z0.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("RBM start must be nonnegative".to_string()));
    }
    Ok(())
}

/// The free Brownian path W used by [`simulate_rbm`] for the same seed.
pub fn brownian_path(spec: &RbmSpec, z0: &[f64], horizon: f64, step: f64, seed: u64) -> Result<Path> {
    check_start(spec, z0)?;
    let times = skorohod::uniform_grid(horizon, step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    brownian_segment(spec, z0, &times, &mut rng)
}

/// Reflects a discretized Brownian path started at `z0`.
pub fn simulate_rbm(spec: &RbmSpec, z0: &[f64], horizon: f64, step: f64, seed: u64) -> Result<ReflectionSolution> {
    let w = brownian_path(spec, z0, horizon, step, seed)?;
    skorohod::reflect(&w, spec.routing(), skorohod::DEFAULT_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbmSamplingPlan {
    pub warmup: f64,
    pub spacing: f64,
    pub step: f64,
    pub n_samples: usize,
    pub replications: usize,
}

impl RbmSamplingPlan {
    /// Step 0.01 x drift scale, warmup 10 and spacing 5 relaxation times.
    pub fn defaults(spec: &RbmSpec, n_samples: usize) -> Self {
        let t = spec.relaxation_time();
        RbmSamplingPlan {
            warmup: 10.0 * t,
            spacing: 5.0 * t,
            step: spec.default_step(),
            n_samples,
            replications: 1,
        }
    }
}

/// Advances the RBM from `z` over `duration`, reflecting in bounded chunks.
/// Reflection restarted from the current state is exact, so chunking does
/// not change the law.
fn advance<R: Rng>(spec: &RbmSpec, z: &mut Vec<f64>, duration: f64, step: f64, rng: &mut R) -> Result<()> {
    let total = (duration / step - 1e-9).ceil().max(1.0) as usize;
    let h = duration / total as f64;
    let mut done = 0;
    while done < total {
        let m = (total - done).min(CHUNK_POINTS);
        let times: Vec<f64> = (0..=m).map(|i| i as f64 * h).collect();
        let w = brownian_segment(spec, z, &times, rng)?;
        let sol = skorohod::reflect(&w, spec.routing(), skorohod::DEFAULT_TOL)?;
        *z = sol.q.last().iter().map(|v| v.max(0.0)).collect();
        done += m;
    }
    Ok(())
}

/// Spaced samples of Z from long runs started at the origin.
pub fn rbm_stationary_sample(spec: &RbmSpec, plan: &RbmSamplingPlan, seed: u64) -> Result<StationarySampleSet> {
    if !spec.is_stable() {
        return Err(Error::UnstableRbm);
    }
    if !(plan.spacing > 0.0 && plan.step > 0.0 && plan.warmup >= 0.0) {
        return Err(Error::InvalidArgument(
            "spacing and step must be positive, warmup nonnegative".to_string(),
        ));
    }
    if plan.n_samples == 0 || plan.replications == 0 {
        return Err(Error::InvalidArgument(
            "need at least one sample and one replication".to_string(),
        ));
    }
    let dim = spec.dim();
    let seeds: Vec<u64> = (0..plan.replications).map(|r| replication_seed(seed, r)).collect();
    let runs: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut z = vec![0.0; dim];
            if plan.warmup > 0.0 {
                advance(spec, &mut z, plan.warmup, plan.step, &mut rng)?;
            }
            let mut rows = Vec::with_capacity(plan.n_samples);
            for _ in 0..plan.n_samples {
                advance(spec, &mut z, plan.spacing, plan.step, &mut rng)?;
                rows.push(z.clone());
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut replication = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        replication.extend(std::iter::repeat_n(r, run.len()));
        rows.extend(run);
    }
    let hash = {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(&spec.params()).expect("params serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    Ok(StationarySampleSet {
        metadata: SampleMetadata {
            kind: SampleKind::Rbm,
            dim,
            warmup: plan.warmup,
            spacing: plan.spacing,
            samples_per_replication: plan.n_samples,
            replications: plan.replications,
            seeds,
            spec_hash: hash,
            scale: 1.0,
            step: Some(plan.step),
            station: None,
            visits: None,
        },
        rows,
        replication,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{DistributionSpec, NetworkSpec, StationSpec};

    fn mm1_seq() -> HeavyTrafficSequence {
        HeavyTrafficSequence::new(NetworkSpec::mm1(1.0, 1.0).validate().unwrap(), vec![1.0]).unwrap()
    }

    fn tandem_seq(service1: DistributionSpec) -> HeavyTrafficSequence {
        let net = NetworkSpec {
            stations: vec![
                StationSpec {
                    name: None,
                    arrival: Some(DistributionSpec::Exponential { rate: 1.0 }),
                    service: service1,
                },
                StationSpec {
                    name: None,
                    arrival: None,
                    service: DistributionSpec::Exponential { rate: 1.0 },
                },
            ],
            routing: RoutingMatrix::tandem(2),
        }
        .validate()
        .unwrap();
        HeavyTrafficSequence::new(net, vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn single_station_parameters() {
        let spec = rbm_params(&mm1_seq()).unwrap();
        assert_eq!(spec.beta(), &[-1.0]);
        assert_eq!(spec.gamma()[(0, 0)], 2.0);
        assert!(spec.is_stable());
        assert_eq!(product_form_rates(&spec).unwrap(), vec![1.0]);
    }

    #[test]
    fn deterministic_service_single_station() {
        let mut spec = NetworkSpec::mm1(1.0, 1.0);
        spec.stations[0].service = DistributionSpec::Deterministic { value: 1.0 };
        let seq = HeavyTrafficSequence::new(spec.validate().unwrap(), vec![1.0]).unwrap();
        assert_eq!(rbm_params(&seq).unwrap().gamma()[(0, 0)], 1.0);
    }

    #[test]
    fn exponential_tandem() {
        let spec = rbm_params(&tandem_seq(DistributionSpec::Exponential { rate: 1.0 })).unwrap();
        assert_eq!(spec.gamma(), &DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));
        assert_eq!(spec.beta(), &[-1.0, 0.0]);
        assert!(spec.skew_relative_error() <= 1e-12);
        assert_eq!(product_form_rates(&spec).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn deterministic_service_tandem_has_no_product_form() {
        let spec = rbm_params(&tandem_seq(DistributionSpec::Deterministic { value: 1.0 })).unwrap();
        assert_eq!(spec.gamma(), &DMatrix::identity(2, 2));
        match product_form_rates(&spec) {
            Err(Error::NoProductForm { residual, .. }) => {
                assert_eq!(residual, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
            }
            other => panic!("expected no product form, got {other:?}"),
        }
    }

    #[test]
    fn unstable_and_invalid_inputs() {
        let r = RoutingMatrix::zeros(1);
        let spec = RbmSpec::new(vec![1.0], DMatrix::from_element(1, 1, 2.0), r.clone()).unwrap();
        assert!(!spec.is_stable());
        assert_eq!(product_form_rates(&spec), Err(Error::UnstableRbm));
        let plan = RbmSamplingPlan {
            warmup: 1.0,
            spacing: 1.0,
            step: 0.1,
            n_samples: 1,
            replications: 1,
        };
        assert_eq!(rbm_stationary_sample(&spec, &plan, 1).unwrap_err(), Error::UnstableRbm);
        assert!(matches!(
            RbmSpec::new(vec![-1.0], DMatrix::from_element(1, 1, -1.0), r),
            Err(Error::InvalidCovariance(_))
        ));
    }

    #[test]
    fn degenerate_covariance_is_fluid_drain() {
        let spec = RbmSpec::new(vec![-1.0], DMatrix::zeros(1, 1), RoutingMatrix::zeros(1)).unwrap();
        let sol = simulate_rbm(&spec, &[1.0], 3.0, 0.01, 4).unwrap();
        for i in 0..sol.q.len() {
            let t = sol.q.times()[i];
            assert!((sol.q.get(i, 0) - (1.0 - t).max(0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn params_round_trip_through_serde() {
        let spec = rbm_params(&tandem_seq(DistributionSpec::Exponential { rate: 1.0 })).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: RbmSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn default_plan_scales() {
        let spec = RbmSpec::new(vec![-1.0], DMatrix::from_element(1, 1, 2.0), RoutingMatrix::zeros(1)).unwrap();
        let plan = RbmSamplingPlan::defaults(&spec, 10);
        assert!((plan.step - 0.01).abs() < 1e-15);
        assert!((plan.spacing - 20.0).abs() < 1e-12);
    }
}
