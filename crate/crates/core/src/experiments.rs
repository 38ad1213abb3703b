//! Heavy-traffic experiments: scaled stationary queue lengths and sojourn
//! times of a network sequence compared with the stationary law of the
//! limiting RBM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ReferenceMode};
use crate::error::{Error, Result};
use crate::network::HeavyTrafficSequence;
use crate::rbm::{self, RbmSamplingPlan, RbmSpec};
use crate::samples::{SampleMetadata, StationarySampleSet};
use crate::sim::{self, derive_seed, SamplingPlan, SojournPlan};
use crate::stats;

const QUANTILE_LEVELS: [f64; 6] = [0.1, 0.25, 0.5, 0.75, 0.9, 0.99];
/// Number of batches used to attach error bars to pooled statistics.
const ERROR_BATCHES: usize = 10;
const SEED_LABEL_QUEUE: u64 = 1;
const SEED_LABEL_SOJOURN: u64 = 2;
const SEED_LABEL_RBM: u64 = 3;

/// Stationary law the scaled samples are compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceLaw {
    /// Independent exponential marginals with rates `eta`.
    ProductForm { eta: Vec<f64> },
    /// Long-run RBM samples.
    Simulation {
        metadata: SampleMetadata,
        mean: Vec<f64>,
        samples: Vec<Vec<f64>>,
    },
}

impl ReferenceLaw {
    pub fn marginal_mean(&self, j: usize) -> f64 {
        match self {
            ReferenceLaw::ProductForm { eta } => 1.0 / eta[j],
            ReferenceLaw::Simulation { mean, .. } => mean[j],
        }
    }

    /// E[Z_j^p].
    pub fn marginal_moment(&self, j: usize, p: u32) -> f64 {
        match self {
            ReferenceLaw::ProductForm { eta } => (1..=p).map(f64::from).product::<f64>() / eta[j].powi(p as i32),
            ReferenceLaw::Simulation { samples, .. } => {
                stats::mean(&samples.iter().map(|r| r[j].powi(p as i32)).collect::<Vec<_>>())
            }
        }
    }

    /// P(Z_j <= z).
    pub fn marginal_cdf(&self, j: usize, z: f64) -> f64 {
        match self {
            ReferenceLaw::ProductForm { eta } => {
                if z < 0.0 {
                    0.0
                } else {
                    1.0 - (-eta[j] * z).exp()
                }
            }
            ReferenceLaw::Simulation { samples, .. } => {
                samples.iter().filter(|r| r[j] <= z).count() as f64 / samples.len() as f64
            }
        }
    }

    /// P(Z > z componentwise).
    pub fn joint_tail(&self, z: &[f64]) -> f64 {
        match self {
            ReferenceLaw::ProductForm { eta } => (-eta.iter().zip(z).map(|(e, v)| e * v).sum::<f64>()).exp(),
            ReferenceLaw::Simulation { samples, .. } => joint_tail(samples, z),
        }
    }

    fn marginal_distance(&self, xs: &[f64], j: usize) -> f64 {
        match self {
            ReferenceLaw::ProductForm { .. } => stats::sup_distance_to_cdf(xs, |z| self.marginal_cdf(j, z)),
            ReferenceLaw::Simulation { samples, .. } => {
                let col: Vec<f64> = samples.iter().map(|r| r[j]).collect();
                stats::two_sample_sup_distance(xs, &col)
            }
        }
    }
}

fn joint_tail(rows: &[Vec<f64>], z: &[f64]) -> f64 {
    rows.iter().filter(|r| r.iter().zip(z).all(|(a, b)| a > b)).count() as f64 / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTailPoint {
    pub z: Vec<f64>,
    pub empirical: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    pub station: usize,
    pub p: u32,
    pub empirical: f64,
    pub reference: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    /// Batch standard error of the empirical moment.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NRecord {
    pub n: u64,
    pub rho: Vec<f64>,
    pub samples: usize,
    pub replications: usize,
    pub seeds: Vec<u64>,
    pub spec_hash: String,
    pub warmup: f64,
    pub spacing: f64,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Per station, (level, quantile) pairs of the scaled marginal.
    pub quantiles: Vec<Vec<(f64, f64)>>,
    pub sup_distance: Vec<f64>,
    pub sup_distance_se: Vec<f64>,
    pub joint_tail: Vec<JointTailPoint>,
    pub joint_tail_max_error: f64,
    pub moments: Vec<MomentError>,
}

/// Closed-form distance for the critical single exponential queue:
/// sup_s |(1 - 1/sqrt(n))^(s sqrt(n)) - exp(-s)|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub n: u64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeVerdict {
    pub station: usize,
    /// Least-squares slope of distance against ln n.
    pub slope: f64,
    pub slope_se: f64,
    pub decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub metadata: SampleMetadata,
    pub simulated_mean: Vec<f64>,
    pub simulated_se: Vec<f64>,
    pub product_form_mean: Vec<f64>,
    /// |simulated - product form| <= 3 SE at every station.
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterchangeReport {
    pub spec_hash: String,
    pub seed: u64,
    pub kappa: Vec<f64>,
    pub rbm: rbm::RbmParams,
    pub reference: ReferenceLaw,
    pub records: Vec<NRecord>,
    pub verdicts: Vec<SlopeVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Vec<OracleRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_validation: Option<CrossValidation>,
}

impl InterchangeReport {
    pub fn decreasing(&self) -> bool {
        self.verdicts.iter().all(|v| v.decreasing)
    }
}

/// sup_s |(1 - 1/sqrt(n))^(s sqrt(n)) - exp(-s)|, by a fine grid search on
/// s in [0, 20] refined with golden-section steps around the best point.
pub fn mm1_oracle_distance(n: u64) -> f64 {
    let root = (n as f64).sqrt();
    let c = -root * (1.0 - 1.0 / root).ln();
    let f = |s: f64| ((-c * s).exp() - (-s).exp()).abs();
    let grid = 20_000;
    let (mut best, mut arg) = (0.0, 0.0);
    for i in 0..=grid {
        let s = 20.0 * i as f64 / grid as f64;
        if f(s) > best {
            best = f(s);
            arg = s;
        }
    }
    let (mut lo, mut hi) = ((arg - 1e-3).max(0.0), arg + 1e-3);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) > f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    best.max(f(0.5 * (lo + hi)))
}

fn mm1_like(seq: &HeavyTrafficSequence) -> bool {
    let net = seq.base();
    net.dim() == 1
        && net.routing().get(0, 0) == 0.0
        && matches!(
            net.spec().stations[0].arrival,
            Some(crate::network::DistributionSpec::Exponential { .. })
        )
        && matches!(
            net.spec().stations[0].service,
            crate::network::DistributionSpec::Exponential { .. }
        )
}

/// Warmup and spacing for member n: warmup_factor n / kappa_min^2 and spacing_factor n.
pub fn sampling_plan(cfg: &ExperimentConfig, seq: &HeavyTrafficSequence, n: u64) -> SamplingPlan {
    let e = &cfg.experiment;
    SamplingPlan {
        warmup: e.warmup_factor * n as f64 / seq.kappa_min().powi(2),
        spacing: e.spacing_factor * n as f64,
        n_samples: e.samples,
        replications: e.replications,
    }
}

fn batch_groups(set: &StationarySampleSet) -> Vec<Vec<usize>> {
    let reps = set.metadata.replications;
    if reps >= ERROR_BATCHES / 2 {
        let mut groups = vec![Vec::new(); reps];
        for (i, &r) in set.replication.iter().enumerate() {
            groups[r].push(i);
        }
        groups.retain(|g| !g.is_empty());
        groups
    } else {
        let len = (set.len() / ERROR_BATCHES).max(1);
        (0..set.len())
            .collect::<Vec<_>>()
            .chunks(len)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Standard error of a pooled statistic from its values on disjoint batches.
fn batch_se(groups: &[Vec<usize>], stat: impl Fn(&[usize]) -> f64) -> f64 {
    let values: Vec<f64> = groups.iter().map(|g| stat(g)).collect();
    stats::standard_error(&values)
}

fn reference_law(cfg: &ExperimentConfig, spec: &RbmSpec, seed: u64) -> Result<(ReferenceLaw, Option<CrossValidation>)> {
    let e = &cfg.experiment;
    let rbm_sample = || {
        let mut plan = RbmSamplingPlan::defaults(spec, e.rbm_samples.div_ceil(e.replications));
        plan.replications = e.replications;
        rbm::rbm_stationary_sample(spec, &plan, derive_seed(seed, &[SEED_LABEL_RBM]))
    };
    let simulated = |set: StationarySampleSet| {
        let mean = (0..set.dim()).map(|j| stats::mean(&set.column(j))).collect();
        ReferenceLaw::Simulation {
            metadata: set.metadata,
            mean,
            samples: set.rows,
        }
    };
    match e.reference {
        ReferenceMode::Simulation => Ok((simulated(rbm_sample()?), None)),
        ReferenceMode::ProductForm => {
            let eta = rbm::product_form_rates(spec)?;
            Ok((ReferenceLaw::ProductForm { eta }, None))
        }
        ReferenceMode::Auto => match rbm::product_form_rates(spec) {
            Ok(eta) => {
                let cv = if e.cross_validate {
                    let set = rbm_sample()?;
                    let groups = batch_groups(&set);
                    let dim = set.dim();
                    let simulated_mean: Vec<f64> = (0..dim).map(|j| stats::mean(&set.column(j))).collect();
                    let simulated_se: Vec<f64> = (0..dim)
                        .map(|j| {
                            batch_se(&groups, |g| {
                                stats::mean(&g.iter().map(|&i| set.rows[i][j]).collect::<Vec<_>>())
                            })
                        })
                        .collect();
                    let product_form_mean: Vec<f64> = eta.iter().map(|e| 1.0 / e).collect();
                    let agree =
                        (0..dim).all(|j| (simulated_mean[j] - product_form_mean[j]).abs() <= 3.0 * simulated_se[j]);
                    Some(CrossValidation {
                        metadata: set.metadata,
                        simulated_mean,
                        simulated_se,
                        product_form_mean,
                        agree,
                    })
                } else {
                    None
                };
                Ok((ReferenceLaw::ProductForm { eta }, cv))
            }
            Err(Error::NoProductForm { .. }) => Ok((simulated(rbm_sample()?), None)),
            Err(e) => Err(e),
        },
    }
}

fn tail_points(grid: &[f64], dim: usize) -> Vec<Vec<f64>> {
    if dim <= 3 {
        let mut points = vec![Vec::new()];
        for _ in 0..dim {
            points = points
                .into_iter()
                .flat_map(|p| {
                    grid.iter().map(move |&z| {
                        let mut q = p.clone();
                        q.push(z);
                        q
                    })
                })
                .collect();
        }
        points
    } else {
        grid.iter().map(|&z| vec![z; dim]).collect()
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    seq: &HeavyTrafficSequence,
    reference: &ReferenceLaw,
    n: u64,
    set: &StationarySampleSet,
    plan: &SamplingPlan,
) -> Result<NRecord> {
    let net = seq.member(n)?;
    let dim = set.dim();
    let groups = batch_groups(set);
    let cols: Vec<Vec<f64>> = (0..dim).map(|j| set.column(j)).collect();
    let sub = |g: &[usize], j: usize| g.iter().map(|&i| set.rows[i][j]).collect::<Vec<f64>>();
    let mean: Vec<f64> = cols.iter().map(|c| stats::mean(c)).collect();
    let mean_se: Vec<f64> = (0..dim)
        .map(|j| batch_se(&groups, |g| stats::mean(&sub(g, j))))
        .collect();
    let covariance: Vec<Vec<f64>> = (0..dim)
        .map(|a| (0..dim).map(|b| stats::covariance(&cols[a], &cols[b])).collect())
        .collect();
    let quantiles = cols
        .iter()
        .map(|c| {
            let s = stats::sorted(c);
            QUANTILE_LEVELS
                .iter()
                .map(|&p| (p, stats::quantile_sorted(&s, p)))
                .collect()
        })
        .collect();
    let sup_distance: Vec<f64> = (0..dim).map(|j| reference.marginal_distance(&cols[j], j)).collect();
    let sup_distance_se: Vec<f64> = (0..dim)
        .map(|j| batch_se(&groups, |g| reference.marginal_distance(&sub(g, j), j)))
        .collect();
    let joint_tail: Vec<JointTailPoint> = tail_points(&cfg.experiment.tail_grid, dim)
        .into_iter()
        .map(|z| JointTailPoint {
            empirical: joint_tail(&set.rows, &z),
            reference: reference.joint_tail(&z),
            z,
        })
        .collect();
    let joint_tail_max_error = joint_tail
        .iter()
        .map(|p| (p.empirical - p.reference).abs())
        .fold(0.0, f64::max);
    let mut moments = Vec::new();
    for &p in &cfg.experiment.moments {
        for j in 0..dim {
            let pow = |xs: &[f64]| stats::mean(&xs.iter().map(|x| x.powi(p as i32)).collect::<Vec<_>>());
            let empirical = pow(&cols[j]);
            let refv = reference.marginal_moment(j, p);
            moments.push(MomentError {
                station: j,
                p,
                empirical,
                reference: refv,
                abs_error: (empirical - refv).abs(),
                rel_error: (empirical - refv).abs() / refv.abs(),
                se: batch_se(&groups, |g| pow(&sub(g, j))),
            });
        }
    }
    Ok(NRecord {
        n,
        rho: net.rho().to_vec(),
        samples: set.len(),
        replications: set.metadata.replications,
        seeds: set.metadata.seeds.clone(),
        spec_hash: net.hash(),
        warmup: plan.warmup,
        spacing: plan.spacing,
        mean,
        mean_se,
        covariance,
        quantiles,
        sup_distance,
        sup_distance_se,
        joint_tail,
        joint_tail_max_error,
        moments,
    })
}

/// Weighted least-squares slope of distance against ln n with its standard
/// error; "decreasing" means slope + slope_se_margin * se < 0.
pub fn slope_verdicts(records: &[NRecord], margin: f64) -> Vec<SlopeVerdict> {
    let dim = records.first().map_or(0, |r| r.sup_distance.len());
    (0..dim)
        .map(|j| {
            let pts: Vec<(f64, f64, f64)> = records
                .iter()
                .map(|r| ((r.n as f64).ln(), r.sup_distance[j], r.sup_distance_se[j].max(1e-12)))
                .collect();
            if pts.len() < 2 {
                return SlopeVerdict {
                    station: j,
                    slope: 0.0,
                    slope_se: f64::INFINITY,
                    decreasing: false,
                };
            }
            let w: Vec<f64> = pts.iter().map(|p| 1.0 / (p.2 * p.2)).collect();
            let sw: f64 = w.iter().sum();
            let xbar = pts.iter().zip(&w).map(|(p, w)| w * p.0).sum::<f64>() / sw;
            let ybar = pts.iter().zip(&w).map(|(p, w)| w * p.1).sum::<f64>() / sw;
            let sxx: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p.0 - xbar).powi(2)).sum();
            let sxy: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p.0 - xbar) * (p.1 - ybar)).sum();
            let slope = sxy / sxx;
            let slope_se = (1.0 / sxx).sqrt();
            SlopeVerdict {
                station: j,
                slope,
                slope_se,
                decreasing: slope + margin * slope_se < 0.0,
            }
        })
        .collect()
}

/// Seed for member n; independent of which other n are run.
pub fn member_seed(seed: u64, label: u64, n: u64) -> u64 {
    derive_seed(seed, &[label, n])
}

/// Scaled stationary samples Q^n / sqrt(n) for every n in the config.
pub fn scaled_samples(
    cfg: &ExperimentConfig,
    seq: &HeavyTrafficSequence,
    seed: u64,
) -> Result<Vec<(u64, SamplingPlan, StationarySampleSet)>> {
    cfg.experiment
        .n
        .par_iter()
        .map(|&n| {
            let net = seq.member(n)?;
            let plan = sampling_plan(cfg, seq, n);
            let set =
                sim::stationary_sample(&net, &plan, member_seed(seed, SEED_LABEL_QUEUE, n))?.scaled((n as f64).sqrt());
            Ok((n, plan, set))
        })
        .collect()
}

pub fn run_interchange(cfg: &ExperimentConfig, seed: u64) -> Result<InterchangeReport> {
    Ok(run_interchange_with_samples(cfg, seed)?.0)
}

/// As [`run_interchange`], also returning the scaled sample set of each n.
pub fn run_interchange_with_samples(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(InterchangeReport, Vec<(u64, StationarySampleSet)>)> {
    cfg.validate()?;
    let seq = cfg.sequence()?;
    let spec = rbm::rbm_params(&seq)?;
    let (reference, cross_validation) = reference_law(cfg, &spec, seed)?;
    let sets = scaled_samples(cfg, &seq, seed)?;
    let records = sets
        .iter()
        .map(|(n, plan, set)| summarize(cfg, &seq, &reference, *n, set, plan))
        .collect::<Result<Vec<_>>>()?;
    let oracle = mm1_like(&seq).then(|| {
        cfg.experiment
            .n
            .iter()
            .map(|&n| OracleRow {
                n,
                distance: mm1_oracle_distance(n),
            })
            .collect()
    });
    let report = InterchangeReport {
        spec_hash: seq.base().hash(),
        seed,
        kappa: seq.kappa().to_vec(),
        rbm: spec.params(),
        verdicts: slope_verdicts(&records, cfg.experiment.slope_se),
        reference,
        records,
        oracle,
        cross_validation,
    };
    Ok((report, sets.into_iter().map(|(n, _, set)| (n, set)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum InterchangeLine {
    Header {
        spec_hash: String,
        seed: u64,
        kappa: Vec<f64>,
        rbm: rbm::RbmParams,
        reference: ReferenceLaw,
    },
    Member(NRecord),
    Verdict(SlopeVerdict),
    Oracle(OracleRow),
    CrossValidation(CrossValidation),
}

impl InterchangeReport {
    /// One header line, one line per n, per verdict and per oracle row.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![InterchangeLine::Header {
            spec_hash: self.spec_hash.clone(),
            seed: self.seed,
            kappa: self.kappa.clone(),
            rbm: self.rbm.clone(),
            reference: self.reference.clone(),
        }];
        lines.extend(self.records.iter().cloned().map(InterchangeLine::Member));
        lines.extend(self.verdicts.iter().cloned().map(InterchangeLine::Verdict));
        lines.extend(self.oracle.iter().flatten().cloned().map(InterchangeLine::Oracle));
        lines.extend(
            self.cross_validation
                .iter()
                .cloned()
                .map(InterchangeLine::CrossValidation),
        );
        to_lines(&lines)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report: Option<InterchangeReport> = None;
        for line in from_lines::<InterchangeLine>(text)? {
            match (line, report.as_mut()) {
                (
                    InterchangeLine::Header {
                        spec_hash,
                        seed,
                        kappa,
                        rbm,
                        reference,
                    },
                    None,
                ) => {
                    report = Some(InterchangeReport {
                        spec_hash,
                        seed,
                        kappa,
                        rbm,
                        reference,
                        records: Vec::new(),
                        verdicts: Vec::new(),
                        oracle: None,
                        cross_validation: None,
                    })
                }
                (InterchangeLine::Member(r), Some(rep)) => rep.records.push(r),
                (InterchangeLine::Verdict(v), Some(rep)) => rep.verdicts.push(v),
                (InterchangeLine::Oracle(o), Some(rep)) => rep.oracle.get_or_insert_with(Vec::new).push(o),
                (InterchangeLine::CrossValidation(c), Some(rep)) => rep.cross_validation = Some(c),
                _ => {
                    return Err(Error::Config(
                        "report must start with exactly one header line".to_string(),
                    ))
                }
            }
        }
        report.ok_or_else(|| Error::Config("empty report".to_string()))
    }
}

pub(crate) fn to_lines<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub(crate) fn from_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("bad record: {e}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SojournRecord {
    pub station: usize,
    pub visits: Vec<u32>,
    pub n: u64,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub warmup: f64,
    pub thin: usize,
    /// Mean of D / sqrt(n).
    pub mean: f64,
    pub se: f64,
    /// h' M E[Z] under the reference law.
    pub reference_mean: f64,
    pub rel_error: f64,
    pub within_3se: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SojournReport {
    pub spec_hash: String,
    pub seed: u64,
    pub reference: ReferenceLaw,
    pub records: Vec<SojournRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum SojournLine {
    Header {
        spec_hash: String,
        seed: u64,
        reference: ReferenceLaw,
    },
    Sojourn(SojournRecord),
}

impl SojournReport {
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![SojournLine::Header {
            spec_hash: self.spec_hash.clone(),
            seed: self.seed,
            reference: self.reference.clone(),
        }];
        lines.extend(self.records.iter().cloned().map(SojournLine::Sojourn));
        to_lines(&lines)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = from_lines::<SojournLine>(text)?.into_iter();
        let Some(SojournLine::Header {
            spec_hash,
            seed,
            reference,
        }) = lines.next()
        else {
            return Err(Error::Config("report must start with a header line".to_string()));
        };
        let records = lines
            .map(|l| match l {
                SojournLine::Sojourn(r) => Ok(r),
                SojournLine::Header { .. } => Err(Error::Config("duplicate header line".to_string())),
            })
            .collect::<Result<_>>()?;
        Ok(SojournReport {
            spec_hash,
            seed,
            reference,
            records,
        })
    }
}

/// Sojourn plan for member n: warmup as for queue lengths, thinning
/// `sojourn_thin` (default n) so kept jobs are roughly decorrelated.
pub fn sojourn_plan(cfg: &ExperimentConfig, seq: &HeavyTrafficSequence, n: u64) -> SojournPlan {
    let e = &cfg.experiment;
    SojournPlan {
        warmup: e.warmup_factor * n as f64 / seq.kappa_min().powi(2),
        n_samples: e.sojourn_samples,
        thin: if e.sojourn_thin == 0 {
            n as usize
        } else {
            e.sojourn_thin
        },
        replications: e.replications,
    }
}

pub fn run_sojourn(cfg: &ExperimentConfig, seed: u64) -> Result<SojournReport> {
    cfg.validate()?;
    if cfg.experiment.sojourn.is_empty() {
        return Err(Error::Config(
            "experiment.sojourn lists no (station, visits) targets".to_string(),
        ));
    }
    let seq = cfg.sequence()?;
    let base = seq.base();
    for t in &cfg.experiment.sojourn {
        sim::check_visit_vector(base, t.station, &t.visits)?;
    }
    let spec = rbm::rbm_params(&seq)?;
    let (reference, _) = reference_law(cfg, &spec, seed)?;
    let jobs: Vec<(usize, u64)> = (0..cfg.experiment.sojourn.len())
        .flat_map(|t| cfg.experiment.n.iter().map(move |&n| (t, n)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(t, n)| {
            let target = &cfg.experiment.sojourn[t];
            let net = seq.member(n)?;
            let plan = sojourn_plan(cfg, &seq, n);
            let s = derive_seed(seed, &[SEED_LABEL_SOJOURN, t as u64, n]);
            let set = sim::sojourn_times(&net, target.station, &target.visits, &plan, s)?.scaled((n as f64).sqrt());
            let xs = set.column(0);
            let groups = batch_groups(&set);
            let se = batch_se(&groups, |g| stats::mean(&g.iter().map(|&i| xs[i]).collect::<Vec<_>>()));
            let mean = stats::mean(&xs);
            let reference_mean: f64 = target
                .visits
                .iter()
                .enumerate()
                .map(|(j, &h)| h as f64 * reference.marginal_mean(j) / base.mu()[j])
                .sum();
            Ok(SojournRecord {
                station: target.station,
                visits: target.visits.clone(),
                n,
                samples: set.len(),
                seeds: set.metadata.seeds.clone(),
                warmup: plan.warmup,
                thin: plan.thin,
                mean,
                se,
                reference_mean,
                rel_error: (mean - reference_mean).abs() / reference_mean,
                within_3se: (mean - reference_mean).abs() <= 3.0 * se,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SojournReport {
        spec_hash: base.hash(),
        seed,
        reference,
        records,
    })
}

/// Empirical and reference CDF of the scaled marginal at station `j`,
/// on `points` evenly spaced levels up to the 99.5% sample quantile.
pub fn cdf_table(set: &StationarySampleSet, reference: &ReferenceLaw, j: usize, points: usize) -> Vec<(f64, f64, f64)> {
    let s = stats::sorted(&set.column(j));
    let top = stats::quantile_sorted(&s, 0.995).max(1e-9);
    (0..=points)
        .map(|i| {
            let z = top * i as f64 / points as f64;
            let emp = s.partition_point(|&v| v <= z) as f64 / s.len() as f64;
            (z, emp, reference.marginal_cdf(j, z))
        })
        .collect()
}
