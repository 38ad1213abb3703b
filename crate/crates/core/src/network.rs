//! Network parameters: primitive distributions, the routing matrix, the
//! traffic equation and heavy-traffic sequences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Interarrival or service time law. The closed list keeps every input
/// light-tailed with closed-form mean and squared coefficient of variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DistributionSpec {
    Exponential {
        rate: f64,
    },
    /// Sum of `shape` exponential phases, each with rate `rate`.
    Erlang {
        shape: u32,
        rate: f64,
    },
    /// Exponential with rate `rate1` with probability `p`, else rate `rate2`.
    #[serde(rename = "hyperexponential-2")]
    Hyperexponential2 {
        p: f64,
        rate1: f64,
        rate2: f64,
    },
    Deterministic {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
}

impl DistributionSpec {
    pub fn exponential_with_mean(mean: f64) -> Self {
        DistributionSpec::Exponential { rate: 1.0 / mean }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDistribution(msg));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        match *self {
            DistributionSpec::Exponential { rate } if !positive(rate) => {
                bad(format!("exponential rate must be positive, got {rate}"))
            }
            DistributionSpec::Erlang { shape, rate } if shape == 0 || !positive(rate) => bad(format!(
                "erlang needs shape >= 1 and positive rate, got ({shape}, {rate})"
            )),
            DistributionSpec::Hyperexponential2 { p, rate1, rate2 }
                if !(0.0..=1.0).contains(&p) || !positive(rate1) || !positive(rate2) =>
            {
                bad(format!(
                    "hyperexponential-2 needs p in [0,1] and positive rates, got ({p}, {rate1}, {rate2})"
                ))
            }
            DistributionSpec::Deterministic { value } if !positive(value) => {
                bad(format!("deterministic value must be positive, got {value}"))
            }
            DistributionSpec::Uniform { low, high }
                if !(low.is_finite() && high.is_finite() && low >= 0.0 && high > low) =>
            {
                bad(format!("uniform needs 0 <= low < high, got ({low}, {high})"))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DistributionSpec::Exponential { rate } => 1.0 / rate,
            DistributionSpec::Erlang { shape, rate } => shape as f64 / rate,
            DistributionSpec::Hyperexponential2 { p, rate1, rate2 } => p / rate1 + (1.0 - p) / rate2,
            DistributionSpec::Deterministic { value } => value,
            DistributionSpec::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            DistributionSpec::Exponential { rate } => 1.0 / (rate * rate),
            DistributionSpec::Erlang { shape, rate } => shape as f64 / (rate * rate),
            DistributionSpec::Hyperexponential2 { p, rate1, rate2 } => {
                let second = 2.0 * p / (rate1 * rate1) + 2.0 * (1.0 - p) / (rate2 * rate2);
                let m = self.mean();
                second - m * m
            }
            DistributionSpec::Deterministic { .. } => 0.0,
            DistributionSpec::Uniform { low, high } => (high - low).powi(2) / 12.0,
        }
    }

    /// Squared coefficient of variation, variance / mean^2.
    pub fn scv(&self) -> f64 {
        match *self {
            DistributionSpec::Exponential { .. } => 1.0,
            DistributionSpec::Erlang { shape, .. } => 1.0 / shape as f64,
            DistributionSpec::Deterministic { .. } => 0.0,
            _ => {
                let m = self.mean();
                self.variance() / (m * m)
            }
        }
    }

    /// Law of `factor * X` for `X` drawn from `self`; the scv is unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            DistributionSpec::Exponential { rate } => DistributionSpec::Exponential { rate: rate / factor },
            DistributionSpec::Erlang { shape, rate } => DistributionSpec::Erlang {
                shape,
                rate: rate / factor,
            },
            DistributionSpec::Hyperexponential2 { p, rate1, rate2 } => DistributionSpec::Hyperexponential2 {
                p,
                rate1: rate1 / factor,
                rate2: rate2 / factor,
            },
            DistributionSpec::Deterministic { value } => DistributionSpec::Deterministic { value: value * factor },
            DistributionSpec::Uniform { low, high } => DistributionSpec::Uniform {
                low: low * factor,
                high: high * factor,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DistributionSpec::Exponential { rate } => exp1(rng) / rate,
            DistributionSpec::Erlang { shape, rate } => (0..shape).map(|_| exp1(rng)).sum::<f64>() / rate,
            DistributionSpec::Hyperexponential2 { p, rate1, rate2 } => {
                let u: f64 = rng.random();
                if u < p {
                    exp1(rng) / rate1
                } else {
                    exp1(rng) / rate2
                }
            }
            DistributionSpec::Deterministic { value } => value,
            DistributionSpec::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

/// Sub-stochastic J x J routing matrix; entry (j, k) is the probability that
/// a job finishing service at j moves to k.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix(DMatrix<f64>);

impl RoutingMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        for (j, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidRouting(format!(
                    "row {j} has {} entries, expected {dim}",
                    row.len()
                )));
            }
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let m = DMatrix::from_row_slice(dim, dim, &flat);
        let p = RoutingMatrix(m);
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(dim: usize) -> Self {
        RoutingMatrix(DMatrix::zeros(dim, dim))
    }

    /// Routing for a line of `dim` stations, each feeding the next.
    pub fn tandem(dim: usize) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim.saturating_sub(1) {
            m[(j, j + 1)] = 1.0;
        }
        RoutingMatrix(m)
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidRouting(format!(
                "matrix is {}x{}, not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let p = RoutingMatrix(m);
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        for j in 0..self.dim() {
            let mut sum = 0.0;
            for k in 0..self.dim() {
                let p = self.0[(j, k)];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidRouting(format!("entry ({j},{k}) = {p} outside [0,1]")));
                }
                sum += p;
            }
            if sum > 1.0 + 1e-12 {
                return Err(Error::InvalidRouting(format!("row {j} sums to {sum} > 1")));
            }
        }
        self.reflection_inverse().map(|_| ())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.0[(j, k)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|j| self.0.row(j).iter().copied().collect())
            .collect()
    }

    /// Probability of leaving the network after service at `j`.
    pub fn exit_probability(&self, j: usize) -> f64 {
        (1.0 - self.0.row(j).sum()).max(0.0)
    }

    /// The reflection matrix I - P'.
    pub fn reflection(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - self.0.transpose()
    }

    /// [I - P']^-1. A Z-matrix is a nonsingular M-matrix exactly when it is
    /// inverse-nonnegative, which for nonnegative P is equivalent to a spectral
    /// radius below one.
    pub fn reflection_inverse(&self) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        let inv = self
            .reflection()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::NonConvergentRouting("I - P' is singular".to_string()))?;
        let scale = inv.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !scale.is_finite() || scale > 1e12 {
            return Err(Error::NonConvergentRouting(format!(
                "[I - P']^-1 is numerically unbounded (max entry {scale:e})"
            )));
        }
        if inv.iter().any(|&x| x < -1e-9 * scale.max(1.0)) {
            return Err(Error::NonConvergentRouting(
                "[I - P']^-1 has negative entries".to_string(),
            ));
        }
        // Residual check guards against LU accepting a numerically singular system.
        let resid = (self.reflection() * &inv - DMatrix::identity(dim, dim)).abs().max();
        if resid > 1e-8 {
            return Err(Error::NonConvergentRouting(format!(
                "inverse residual {resid:e} too large"
            )));
        }
        Ok(inv)
    }

    /// Gelfand estimate ||P^k||^(1/k) of the spectral radius, k = 64.
    pub fn spectral_radius_estimate(&self) -> f64 {
        let mut m = self.0.clone();
        for _ in 0..6 {
            m = &m * &m;
        }
        let norm = m
            .row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        norm.powf(1.0 / 64.0)
    }
}

impl Serialize for RoutingMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RoutingMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        RoutingMatrix::new(rows).map_err(serde::de::Error::custom)
    }
}

/// Solves the traffic equation lambda = alpha + P' lambda.
pub fn solve_traffic(alpha: &[f64], routing: &RoutingMatrix) -> Result<Vec<f64>> {
    let dim = routing.dim();
    if alpha.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: alpha.len(),
        });
    }
    if alpha.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "external rates must be nonnegative: {alpha:?}"
        )));
    }
    routing.reflection_inverse()?;
    let a = DVector::from_column_slice(alpha);
    let lambda = routing
        .reflection()
        .lu()
        .solve(&a)
        .ok_or_else(|| Error::NonConvergentRouting("I - P' is singular".to_string()))?;
    let resid = (&lambda - &a - routing.matrix().transpose() * &lambda).amax();
    if resid > 1e-10 * (1.0 + lambda.amax()) {
        return Err(Error::NonConvergentRouting(format!(
            "traffic equation residual {resid:e}"
        )));
    }
    Ok(lambda.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// External interarrival law; absent when the station has no external arrivals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival: Option<DistributionSpec>,
    pub service: DistributionSpec,
}

/// Raw network parameters as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub stations: Vec<StationSpec>,
    pub routing: RoutingMatrix,
}

impl NetworkSpec {
    pub fn validate(self) -> Result<Network> {
        validate_network(self)
    }

    /// Hex digest of the canonical JSON encoding; used to tag sample provenance.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("network spec serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Single station with exponential interarrival and service times.
    pub fn mm1(arrival_rate: f64, service_rate: f64) -> Self {
        NetworkSpec {
            stations: vec![StationSpec {
                name: None,
                arrival: Some(DistributionSpec::Exponential { rate: arrival_rate }),
                service: DistributionSpec::Exponential { rate: service_rate },
            }],
            routing: RoutingMatrix::zeros(1),
        }
    }
}

/// A validated network with its derived traffic quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    alpha: Vec<f64>,
    mu: Vec<f64>,
    ca2: Vec<f64>,
    cs2: Vec<f64>,
    lambda: Vec<f64>,
    rho: Vec<f64>,
    workload: Vec<f64>,
}

/// Checks a raw spec and computes lambda, rho and the workload weights w.
pub fn validate_network(spec: NetworkSpec) -> Result<Network> {
    let dim = spec.stations.len();
    if dim == 0 {
        return Err(Error::InvalidArgument("network has no stations".to_string()));
    }
    if spec.routing.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: spec.routing.dim(),
        });
    }
    spec.routing.validate()?;
    let mut alpha = vec![0.0; dim];
    let mut ca2 = vec![0.0; dim];
    let mut mu = vec![0.0; dim];
    let mut cs2 = vec![0.0; dim];
    for (j, st) in spec.stations.iter().enumerate() {
        st.service.validate()?;
        mu[j] = 1.0 / st.service.mean();
        cs2[j] = st.service.scv();
        if let Some(a) = &st.arrival {
            a.validate()?;
            alpha[j] = 1.0 / a.mean();
            ca2[j] = a.scv();
        }
    }
    let lambda = solve_traffic(&alpha, &spec.routing)?;
    let rho: Vec<f64> = lambda.iter().zip(&mu).map(|(l, m)| l / m).collect();
    let inv = spec.routing.reflection_inverse()?;
    // w = e'[I - P']^-1: column sums.
    let workload: Vec<f64> = (0..dim).map(|j| inv.column(j).sum()).collect();
    Ok(Network {
        spec,
        alpha,
        mu,
        ca2,
        cs2,
        lambda,
        rho,
        workload,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.stations.len()
    }

    pub fn routing(&self) -> &RoutingMatrix {
        &self.spec.routing
    }

    /// External arrival rates; zero for stations without external arrivals.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn mean_service(&self) -> Vec<f64> {
        self.mu.iter().map(|m| 1.0 / m).collect()
    }

    /// Arrival scv per station (zero where there are no external arrivals).
    pub fn ca2(&self) -> &[f64] {
        &self.ca2
    }

    pub fn cs2(&self) -> &[f64] {
        &self.cs2
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn rho_max(&self) -> f64 {
        self.rho.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.rho_max() < 1.0
    }

    /// Workload weights w = e'[I - P']^-1; every entry is at least one.
    pub fn workload(&self) -> &[f64] {
        &self.workload
    }

    pub fn has_arrivals(&self, j: usize) -> bool {
        self.spec.stations[j].arrival.is_some()
    }

    /// min_j mu_j (1 - rho_j), the fluid drain rate of the workload.
    pub fn drain_rate(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(m, r)| m * (1.0 - r))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn hash(&self) -> String {
        self.spec.hash()
    }

    pub fn require_stable(&self) -> Result<()> {
        if self.is_stable() {
            Ok(())
        } else {
            Err(Error::Unstable {
                rho_max: self.rho_max(),
            })
        }
    }
}

/// A critically loaded base network together with the per-station constants
/// kappa0 that define its heavy-traffic perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyTrafficSequence {
    base: Network,
    kappa0: Vec<f64>,
    kappa: Vec<f64>,
}

impl HeavyTrafficSequence {
    pub fn new(base: Network, kappa0: Vec<f64>) -> Result<Self> {
        let dim = base.dim();
        if kappa0.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: kappa0.len(),
            });
        }
        if kappa0.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "kappa0 entries must be strictly positive: {kappa0:?}"
            )));
        }
        let max_gap = base
            .lambda
            .iter()
            .zip(&base.mu)
            .map(|(l, m)| (l - m).abs() / m.max(1.0))
            .fold(0.0, f64::max);
        if max_gap > 1e-10 {
            return Err(Error::NotCritical { max_gap });
        }
        // Arrival rates of member n are alpha_j (1 - kappa0_j / sqrt(n)), so
        // lambda^n = lambda - [I - P']^-1 (alpha o kappa0) / sqrt(n) and
        // sqrt(n) (1 - rho^n) = M [I - P']^-1 (alpha o kappa0) =: kappa.
        let inv = base.routing().reflection_inverse()?;
        let weighted = DVector::from_iterator(dim, base.alpha.iter().zip(&kappa0).map(|(a, k)| a * k));
        let pushed = inv * weighted;
        let kappa: Vec<f64> = (0..dim).map(|j| pushed[j] / base.mu[j]).collect();
        if kappa.iter().any(|&k| k <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "derived kappa must be strictly positive: {kappa:?}"
            )));
        }
        Ok(HeavyTrafficSequence { base, kappa0, kappa })
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn kappa0(&self) -> &[f64] {
        &self.kappa0
    }

    /// sqrt(n) (1 - rho_j^n), constant along the sequence.
    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn kappa_min(&self) -> f64 {
        self.kappa.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn member(&self, n: u64) -> Result<Network> {
        heavy_traffic_member(self, n)
    }
}

/// The n-th network of the sequence: interarrival times stretched so that
/// alpha_j^n = alpha_j (1 - kappa0_j / sqrt(n)); service and routing unchanged.
pub fn heavy_traffic_member(seq: &HeavyTrafficSequence, n: u64) -> Result<Network> {
    if n == 0 {
        return Err(Error::DegenerateMember {
            n,
            reason: "n must be positive".to_string(),
        });
    }
    let root = (n as f64).sqrt();
    let mut spec = seq.base.spec.clone();
    for (j, st) in spec.stations.iter_mut().enumerate() {
        if let Some(a) = &st.arrival {
            let shrink = 1.0 - seq.kappa0[j] / root;
            if shrink <= 0.0 {
                return Err(Error::DegenerateMember {
                    n,
                    reason: format!("station {j}: kappa0 = {} >= sqrt(n)", seq.kappa0[j]),
                });
            }
            st.arrival = Some(a.scaled(1.0 / shrink));
        }
    }
    let net = validate_network(spec)?;
    if let Some(j) = net.rho.iter().position(|&r| r <= 0.0) {
        return Err(Error::DegenerateMember {
            n,
            reason: format!("rho_{j} = {} <= 0", net.rho[j]),
        });
    }
    Ok(net)
}
