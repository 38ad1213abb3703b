//! Monte-Carlo Lyapunov drift certificates and the moment and tail bounds
//! they imply.
//!
//! Suprema over the whole state space are replaced by maxima over a finite
//! set of probe states, so every certificate here is confidence-qualified
//! evidence rather than a proof. Confidence half-widths use the normal
//! approximation (default 95%).

use std::marker::PhantomData;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{HeavyTrafficSequence, Network};
use crate::sim::{derive_seed, Simulator};
use crate::stats;

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Black-box Markov transition: evolve a state for `t0` time units.
pub trait TransitionSampler: Sync {
    type State: Clone + Send + Sync;

    fn evolve(&self, x: &Self::State, t0: f64, rng: &mut ChaCha8Rng) -> Result<Self::State>;
}

/// Wraps a closure as a transition sampler.
pub struct FnSampler<S, F> {
    f: F,
    _state: PhantomData<fn() -> S>,
}

impl<S, F> FnSampler<S, F>
where
    F: Fn(&S, f64, &mut ChaCha8Rng) -> S,
{
    pub fn new(f: F) -> Self {
        FnSampler { f, _state: PhantomData }
    }
}

impl<S, F> TransitionSampler for FnSampler<S, F>
where
    S: Clone + Send + Sync,
    F: Fn(&S, f64, &mut ChaCha8Rng) -> S + Sync,
{
    type State = S;

    fn evolve(&self, x: &S, t0: f64, rng: &mut ChaCha8Rng) -> Result<S> {
        Ok((self.f)(x, t0, rng))
    }
}

/// Queue-length chain of a network. A state is a queue-length vector with
/// fresh interarrival and service clocks, which is the exact Markov state
/// for exponential primitives.
pub struct NetworkSampler<'a> {
    pub net: &'a Network,
}

impl TransitionSampler for NetworkSampler<'_> {
    type State = Vec<u64>;

    fn evolve(&self, x: &Vec<u64>, t0: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
        let seed = rand::Rng::random::<u64>(rng);
        let mut sim = Simulator::new(self.net, seed, x, false)?;
        sim.run_until(t0, |_, _| {})?;
        Ok(sim.q().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    /// E_x Phi(Xi(t0)) - Phi(x) <= -gamma whenever Phi(x) > K.
    Additive,
    /// E_x Phi(Xi(t0)) <= gamma Phi(x) whenever Phi(x) > K, gamma in (0, 1).
    Geometric,
}

/// Monte-Carlo estimate at one probe state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEstimate {
    pub phi: f64,
    /// Mean change for additive drift, mean ratio for geometric drift.
    pub mean: f64,
    pub half_width: f64,
}

impl ProbeEstimate {
    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCertificate {
    pub kind: DriftKind,
    pub t0: f64,
    pub gamma: f64,
    pub k: f64,
    pub confidence: f64,
    pub samples_per_state: usize,
    pub probes: Vec<ProbeEstimate>,
}

impl DriftCertificate {
    /// A certificate with given parameters and no estimation record.
    pub fn new(kind: DriftKind, t0: f64, gamma: f64, k: f64) -> Self {
        DriftCertificate {
            kind,
            t0,
            gamma,
            k,
            confidence: 1.0,
            samples_per_state: 0,
            probes: Vec::new(),
        }
    }
}

fn sample_increments<S: TransitionSampler>(
    sampler: &S,
    phi: &(impl Fn(&S::State) -> f64 + Sync),
    t0: f64,
    probes: &[S::State],
    samples: usize,
    seed: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    probes
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let start = phi(x);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let ends = (0..samples)
                .map(|_| sampler.evolve(x, t0, &mut rng).map(|y| phi(&y)))
                .collect::<Result<Vec<f64>>>()?;
            Ok((start, ends))
        })
        .collect()
}

/// Estimates a drift certificate from probe states.
///
/// Probes are sorted by Phi. The longest run of top probes whose upper
/// confidence limit shows drift (change < 0, or ratio < 1) determines the
/// certificate: K is the largest Phi among the probes below that run (or
/// the smallest probe Phi if every probe drifts), and gamma is the weakest
/// drift within the run.
pub fn estimate_drift<S: TransitionSampler>(
    sampler: &S,
    phi: impl Fn(&S::State) -> f64 + Sync,
    kind: DriftKind,
    t0: f64,
    probes: &[S::State],
    samples_per_state: usize,
    confidence: f64,
    seed: u64,
) -> Result<DriftCertificate> {
    if probes.is_empty() || samples_per_state < 2 {
        return Err(Error::InvalidArgument(
            "need probes and at least two samples per state".to_string(),
        ));
    }
    let z = stats::z_value(confidence);
    let raw = sample_increments(sampler, &phi, t0, probes, samples_per_state, seed)?;
    let mut estimates = Vec::with_capacity(raw.len());
    for (start, ends) in raw {
        let values: Vec<f64> = match kind {
            DriftKind::Additive => ends.iter().map(|e| e - start).collect(),
            DriftKind::Geometric => {
                if start <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "geometric drift needs probes with positive Phi".to_string(),
                    ));
                }
                ends.iter().map(|e| e / start).collect()
            }
        };
        estimates.push(ProbeEstimate {
            phi: start,
            mean: stats::mean(&values),
            half_width: z * stats::standard_error(&values),
        });
    }
    estimates.sort_by(|a, b| a.phi.total_cmp(&b.phi));
    let passes = |e: &ProbeEstimate| match kind {
        DriftKind::Additive => e.upper() < 0.0,
        DriftKind::Geometric => e.upper() < 1.0,
    };
    let first = estimates.iter().rposition(|e| !passes(e)).map_or(0, |i| i + 1);
    if first == estimates.len() {
        return Err(Error::NoCertificate(format!(
            "no drift at the top probe (Phi = {})",
            estimates.last().map_or(f64::NAN, |e| e.phi)
        )));
    }
    let k = if first == 0 {
        estimates[0].phi
    } else {
        estimates[first - 1].phi
    };
    let covered: Vec<&ProbeEstimate> = estimates[first..].iter().filter(|e| e.phi > k).collect();
    let covered = if covered.is_empty() {
        vec![&estimates[first]]
    } else {
        covered
    };
    let gamma = match kind {
        DriftKind::Additive => covered.iter().map(|e| -e.upper()).fold(f64::INFINITY, f64::min),
        DriftKind::Geometric => covered.iter().map(|e| e.upper()).fold(0.0, f64::max),
    };
    Ok(DriftCertificate {
        kind,
        t0,
        gamma,
        k,
        confidence,
        samples_per_state,
        probes: estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LFunctionals {
    pub theta: f64,
    pub t0: f64,
    /// Max over probes of E_x exp(theta (Phi(Xi(t0)) - Phi(x))); a lower
    /// estimate of the supremum over all states.
    pub l1: f64,
    /// Max over probes of E_x (Phi(Xi(t0)) - Phi(x))^2 exp(theta (...)^+).
    pub l2: f64,
    /// phi(t0), taken equal to L1.
    pub phi_t0: f64,
    pub overflow_fraction: f64,
}

const OVERFLOW_LIMIT: f64 = 1e-3;

pub fn estimate_l_functionals<S: TransitionSampler>(
    sampler: &S,
    phi: impl Fn(&S::State) -> f64 + Sync,
    theta: f64,
    t0: f64,
    probes: &[S::State],
    samples_per_state: usize,
    seed: u64,
) -> Result<LFunctionals> {
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument(format!("theta must be positive, got {theta}")));
    }
    if probes.is_empty() || samples_per_state == 0 {
        return Err(Error::InvalidArgument("need probes and samples".to_string()));
    }
    let raw = sample_increments(sampler, &phi, t0, probes, samples_per_state, seed)?;
    let (mut l1, mut l2) = (0.0f64, 0.0f64);
    let mut overflow = 0usize;
    let total = raw.len() * samples_per_state;
    for (start, ends) in &raw {
        let (mut s1, mut s2, mut m) = (0.0, 0.0, 0usize);
        for e in ends {
            let d = e - start;
            let a = (theta * d).exp();
            let b = d * d * (theta * d.max(0.0)).exp();
            if !a.is_finite() || !b.is_finite() || a > 1e300 || b > 1e300 {
                overflow += 1;
                continue;
            }
            s1 += a;
            s2 += b;
            m += 1;
        }
        if m > 0 {
            l1 = l1.max(s1 / m as f64);
            l2 = l2.max(s2 / m as f64);
        }
    }
    let overflow_fraction = overflow as f64 / total as f64;
    if overflow_fraction > OVERFLOW_LIMIT {
        return Err(Error::ThetaTooLarge { overflow_fraction });
    }
    Ok(LFunctionals {
        theta,
        t0,
        l1,
        l2,
        phi_t0: l1,
        overflow_fraction,
    })
}

/// phi(t0) K / (1 - gamma): an upper bound on the stationary mean of Phi.
pub fn moment_bound(cert: &DriftCertificate, phi_t0: f64) -> Result<f64> {
    if cert.kind != DriftKind::Geometric {
        return Err(Error::InvalidCertificate(
            "moment bound needs a geometric certificate".to_string(),
        ));
    }
    if !(cert.gamma > 0.0 && cert.gamma < 1.0) {
        return Err(Error::InvalidCertificate(format!(
            "gamma must lie in (0, 1), got {}",
            cert.gamma
        )));
    }
    if !phi_t0.is_finite() {
        return Err(Error::InvalidArgument("phi(t0) must be finite".to_string()));
    }
    Ok(phi_t0 * cert.k / (1.0 - cert.gamma))
}

/// (1 - gamma theta / 2)^-1 L1 exp(-theta (s - K)), clipped to [0, 1]:
/// an upper bound on the stationary probability that Phi exceeds `s`.
pub fn tail_bound(cert: &DriftCertificate, l: &LFunctionals, s: f64) -> Result<f64> {
    if cert.kind != DriftKind::Additive {
        return Err(Error::InvalidCertificate(
            "tail bound needs an additive certificate".to_string(),
        ));
    }
    let lhs = l.theta * l.l2;
    if lhs > cert.gamma {
        return Err(Error::TailConditionFailed { lhs, gamma: cert.gamma });
    }
    if cert.gamma * l.theta > 1.0 {
        return Err(Error::InvalidCertificate(format!(
            "gamma theta = {} exceeds 1",
            cert.gamma * l.theta
        )));
    }
    if s <= cert.k {
        return Err(Error::ThresholdBelowK { s, k: cert.k });
    }
    let b = l.l1 * (-l.theta * (s - cert.k)).exp() / (1.0 - cert.gamma * l.theta / 2.0);
    Ok(b.clamp(0.0, 1.0))
}

/// Settings for the certificate-to-tail-bound pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPipeline {
    pub t0: Vec<f64>,
    pub drift_probes: Vec<Vec<u64>>,
    /// Extra probes for the L functionals (typically small states near the boundary).
    pub l_probes: Vec<Vec<u64>>,
    pub samples_per_state: usize,
    pub thetas: Vec<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCertificate {
    pub certificate: DriftCertificate,
    pub functionals: LFunctionals,
}

impl TailCertificate {
    pub fn bound(&self, s: f64) -> Result<f64> {
        tail_bound(&self.certificate, &self.functionals, s)
    }
}

/// For each drift time, estimates an additive certificate for Phi = total
/// queue length and picks the largest theta on the grid with theta L2 <= gamma.
/// Drift times with no certificate or no admissible theta are skipped.
pub fn tail_certificates(net: &Network, plan: &TailPipeline, seed: u64) -> Result<Vec<TailCertificate>> {
    let sampler = NetworkSampler { net };
    let phi = |q: &Vec<u64>| q.iter().sum::<u64>() as f64;
    let mut thetas = plan.thetas.clone();
    thetas.sort_by(|a, b| b.total_cmp(a));
    let mut probes = plan.l_probes.clone();
    probes.extend(plan.drift_probes.iter().cloned());
    let mut out = Vec::new();
    for (i, &t0) in plan.t0.iter().enumerate() {
        let cert = match estimate_drift(
            &sampler,
            phi,
            DriftKind::Additive,
            t0,
            &plan.drift_probes,
            plan.samples_per_state,
            plan.confidence,
            derive_seed(seed, &[i as u64, 0]),
        ) {
            Ok(c) => c,
            Err(Error::NoCertificate(_)) => continue,
            Err(e) => return Err(e),
        };
        for (m, &theta) in thetas.iter().enumerate() {
            let l = match estimate_l_functionals(
                &sampler,
                phi,
                theta,
                t0,
                &probes,
                plan.samples_per_state,
                derive_seed(seed, &[i as u64, 1, m as u64]),
            ) {
                Ok(l) => l,
                Err(Error::ThetaTooLarge { .. }) => continue,
                Err(e) => return Err(e),
            };
            if theta * l.l2 <= cert.gamma && cert.gamma * theta <= 1.0 {
                out.push(TailCertificate {
                    certificate: cert,
                    functionals: l,
                });
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProbe {
    pub z: Vec<u64>,
    pub workload: f64,
    pub mean_change: f64,
    pub half_width: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadDriftReport {
    pub n: u64,
    pub t0: f64,
    pub c0: f64,
    pub horizon: f64,
    /// The required drift -sqrt(n).
    pub target: f64,
    pub confidence: f64,
    pub probes: Vec<WorkloadProbe>,
    pub pass: bool,
}

/// Estimates E[w'Q^n(n t0)] - w'z from each probe and checks that it is at
/// most -sqrt(n) up to the confidence half-width. Probes must satisfy
/// w'z > c0 sqrt(n).
#[allow(clippy::too_many_arguments)]
pub fn workload_drift_check(
    seq: &HeavyTrafficSequence,
    n: u64,
    t0: f64,
    c0: f64,
    probes: &[Vec<u64>],
    samples: usize,
    confidence: f64,
    seed: u64,
) -> Result<WorkloadDriftReport> {
    let net = seq.member(n)?;
    let root = (n as f64).sqrt();
    let w = net.workload().to_vec();
    let load = |q: &Vec<u64>| q.iter().zip(&w).map(|(&a, b)| a as f64 * b).sum::<f64>();
    for z in probes {
        if z.len() != net.dim() {
            return Err(Error::DimensionMismatch {
                expected: net.dim(),
                actual: z.len(),
            });
        }
        if load(z) <= c0 * root {
            return Err(Error::OutOfRegion {
                workload: load(z),
                limit: c0 * root,
            });
        }
    }
    let horizon = n as f64 * t0;
    let sampler = NetworkSampler { net: &net };
    let zq = stats::z_value(confidence);
    let raw = sample_increments(&sampler, &load, horizon, probes, samples, seed)?;
    let target = -root;
    let probes: Vec<WorkloadProbe> = raw
        .into_iter()
        .zip(probes)
        .map(|((start, ends), z)| {
            let d: Vec<f64> = ends.iter().map(|e| e - start).collect();
            let mean_change = stats::mean(&d);
            let half_width = zq * stats::standard_error(&d);
            WorkloadProbe {
                z: z.clone(),
                workload: start,
                mean_change,
                half_width,
                pass: mean_change <= target + half_width,
            }
        })
        .collect();
    Ok(WorkloadDriftReport {
        n,
        t0,
        c0,
        horizon,
        target,
        confidence,
        pass: probes.iter().all(|p| p.pass),
        probes,
    })
}

/// Drift constants chosen from an empirical free-process deviation constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    /// Estimated E sup_{s <= n t0} |w'(X(s) - x(s))| / sqrt(n t0).
    pub c2: f64,
    pub t0: f64,
    pub c0: f64,
}

/// Free-process deviation constant: runs the member network from queues so
/// long that no station idles within `n t0`, so Q equals the free process X,
/// and measures sup |w'(Q(s) - z - drift s)| scaled by sqrt(n t0).
pub fn estimate_deviation_constant(
    seq: &HeavyTrafficSequence,
    n: u64,
    t0: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let net = seq.member(n)?;
    let dim = net.dim();
    let horizon = n as f64 * t0;
    let w = net.workload();
    let drift = crate::fluid::fluid_drift(&net);
    let z: Vec<u64> = (0..dim)
        .map(|j| (4.0 * (net.mu()[j] + net.lambda()[j]) * horizon + 100.0).ceil() as u64)
        .collect();
    let sups: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|r| {
            let mut sim = Simulator::new(&net, derive_seed(seed, &[r as u64]), &z, false)?;
            let mut sup = 0.0f64;
            sim.run_until(horizon, |ev, s| {
                let dev: f64 = (0..dim)
                    .map(|j| w[j] * (s.q()[j] as f64 - z[j] as f64 - drift[j] * ev.time))
                    .sum();
                sup = sup.max(dev.abs());
            })?;
            if sim.q().contains(&0) {
                return Err(Error::InvalidArgument(
                    "deviation run idled; start queues too short".to_string(),
                ));
            }
            Ok(sup)
        })
        .collect::<Result<_>>()?;
    Ok(stats::mean(&sups) / horizon.sqrt())
}

/// Chooses t0 with C2 sqrt(t0) - a t0 <= -1, a = min_j mu_j kappa_j, by
/// alternating between estimating C2 at the current t0 and re-solving for
/// t0; then c0 = C2 sqrt(t0) + 1.
pub fn drift_constants(seq: &HeavyTrafficSequence, n: u64, samples: usize, seed: u64) -> Result<DriftConstants> {
    let net = seq.base();
    let a = (0..net.dim())
        .map(|j| net.mu()[j] * seq.kappa()[j])
        .fold(f64::INFINITY, f64::min);
    let mut t0 = 1.0;
    let mut c2 = 0.0;
    for round in 0..3 {
        c2 = estimate_deviation_constant(seq, n, t0, samples, derive_seed(seed, &[round]))?;
        let u = (c2 + (c2 * c2 + 4.0 * a).sqrt()) / (2.0 * a);
        t0 = u * u;
    }
    Ok(DriftConstants {
        c2,
        t0,
        c0: c2 * t0.sqrt() + 1.0,
    })
}
