//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when an experiment fails, 2 when the
//! command line or configuration is unusable.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiments::{self, ReferenceLaw};
use crate::fluid;
use crate::lyapunov::{self, TailPipeline};
use crate::rbm::{self, RbmSpec};

pub const OUTPUT_ENV: &str = "GJN_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "gjn-output";
const CDF_POINTS: usize = 200;

#[derive(Debug, Parser)]
#[command(
    name = "gjn",
    version,
    about = "Heavy-traffic experiments for generalized Jackson networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file, or one of the presets mm1, tandem, tandem-deterministic.
    #[arg(long, global = true)]
    pub config: Option<String>,

    /// Master seed.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,

    /// Output directory (overrides $GJN_OUTPUT_DIR and the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Independent replications per sample set.
    #[arg(long, global = true)]
    pub replications: Option<usize>,

    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Scaled stationary queue lengths against the RBM stationary law.
    Interchange,
    /// Scaled stationary sojourn times against their diffusion limit.
    Sojourn,
    /// Fluid path and drain time from the configured initial level.
    Fluid,
    /// RBM parameters, stability and product-form check.
    RbmCheck,
    /// Drift certificates and stationary tail bounds for total queue length.
    TailBound,
}

/// Outcome of a subcommand: files to write and a human summary.
struct Output {
    files: Vec<(String, String)>,
    summary: String,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let Some(name) = cli.config.as_deref() else {
        eprintln!("error: --config is required");
        return 2;
    };
    let mut cfg = match ExperimentConfig::load(name).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(r) = cli.replications {
        if r == 0 {
            eprintln!("error: --replications must be positive");
            return 2;
        }
        cfg.experiment.replications = r;
    }
    let dir = output_dir(&cli, &cfg);
    let result = match cli.command {
        Command::Interchange => interchange(&cfg, cli.seed),
        Command::Sojourn => sojourn(&cfg, cli.seed),
        Command::Fluid => fluid_cmd(&cfg),
        Command::RbmCheck => rbm_check(&cfg),
        Command::TailBound => tail_bound(&cfg, cli.seed),
    };
    let out = match result {
        Ok(o) => o,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Err(e) = write_all(&dir, &out) {
        eprintln!("error: {e}");
        return 1;
    }
    if !cli.quiet {
        print!("{}", out.summary);
        println!("wrote {}", dir.display());
    }
    0
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(d) = &cli.out {
        return d.clone();
    }
    if let Some(d) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(d);
    }
    PathBuf::from(cfg.output.dir.as_deref().unwrap_or(DEFAULT_OUTPUT))
}

fn write_all(dir: &Path, out: &Output) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in &out.files {
        std::fs::write(dir.join(name), body)?;
    }
    std::fs::write(dir.join("summary.txt"), &out.summary)?;
    Ok(())
}

fn interchange(cfg: &ExperimentConfig, seed: u64) -> Result<Output> {
    let (report, sets) = experiments::run_interchange_with_samples(cfg, seed)?;
    let mut files = vec![("report.jsonl".to_string(), report.to_jsonl())];
    for (n, set) in &sets {
        for j in 0..set.dim() {
            let mut csv = String::from("z,empirical,reference\n");
            for (z, e, r) in experiments::cdf_table(set, &report.reference, j, CDF_POINTS) {
                let _ = writeln!(csv, "{z},{e},{r}");
            }
            files.push((format!("cdf_n{n}_station{}.csv", j + 1), csv));
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "interchange  seed={}  network={}", report.seed, report.spec_hash);
    let _ = writeln!(s, "kappa = {:?}", report.kappa);
    match &report.reference {
        ReferenceLaw::ProductForm { eta } => {
            let _ = writeln!(s, "reference: product form, eta = {eta:?}");
        }
        ReferenceLaw::Simulation { mean, .. } => {
            let _ = writeln!(s, "reference: RBM simulation, means = {mean:?}");
        }
    }
    for r in &report.records {
        let _ = writeln!(s, "n={:<6} samples={:<7} mean={:?}", r.n, r.samples, round(&r.mean));
        let _ = writeln!(
            s,
            "         sup-distance={:?} (se {:?})",
            round(&r.sup_distance),
            round(&r.sup_distance_se)
        );
    }
    for v in &report.verdicts {
        let _ = writeln!(
            s,
            "station {}: slope {:.4} (se {:.4}) -> {}",
            v.station + 1,
            v.slope,
            v.slope_se,
            if v.decreasing { "decreasing" } else { "not decreasing" }
        );
    }
    for o in report.oracle.iter().flatten() {
        let _ = writeln!(s, "exact distance n={}: {:.6}", o.n, o.distance);
    }
    if let Some(cv) = &report.cross_validation {
        let _ = writeln!(
            s,
            "cross-validation: simulated means {:?} vs {:?} -> {}",
            round(&cv.simulated_mean),
            round(&cv.product_form_mean),
            if cv.agree { "agree" } else { "disagree" }
        );
    }
    Ok(Output { files, summary: s })
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn sojourn(cfg: &ExperimentConfig, seed: u64) -> Result<Output> {
    let report = experiments::run_sojourn(cfg, seed)?;
    let mut s = String::new();
    let _ = writeln!(s, "sojourn  seed={}  network={}", report.seed, report.spec_hash);
    for r in &report.records {
        let _ = writeln!(
            s,
            "station {} visits {:?} n={:<6} mean={:.4} (se {:.4}) limit={:.4} rel.err={:.3}",
            r.station + 1,
            r.visits,
            r.n,
            r.mean,
            r.se,
            r.reference_mean,
            r.rel_error
        );
    }
    Ok(Output {
        files: vec![("report.jsonl".to_string(), report.to_jsonl())],
        summary: s,
    })
}

fn fluid_cmd(cfg: &ExperimentConfig) -> Result<Output> {
    let settings = cfg
        .fluid
        .as_ref()
        .ok_or_else(|| Error::Config("missing [fluid] block".to_string()))?;
    let net = cfg.stable_network()?;
    let bound = fluid::drain_time_bound(&net, &settings.z)?;
    let step = match settings.step {
        Some(s) => s,
        None => fluid::default_step(&net, &settings.z)?,
    };
    let horizon = settings.horizon.unwrap_or((1.5 * bound).max(1.0));
    let sol = fluid::fluid_solve(&net, &settings.z, horizon, step)?;
    let record = json!({
        "spec_hash": net.hash(),
        "rho": net.rho(),
        "z": sol.z,
        "drift": sol.drift,
        "workload": net.workload(),
        "drain_time": sol.drain_time,
        "drain_time_bound": bound,
        "horizon": horizon,
        "step": step,
    });
    let summary = format!(
        "fluid  network={}\nz = {:?}\ndrift = {:?}\ndrain time = {}\nbound = {bound:.6}\n",
        net.hash(),
        sol.z,
        round(&sol.drift),
        sol.drain_time
            .map_or("not drained within horizon".to_string(), |t| format!("{t:.6}")),
    );
    Ok(Output {
        files: vec![
            ("report.jsonl".to_string(), format!("{record}\n")),
            ("fluid_path.csv".to_string(), sol.q.to_delimited()),
        ],
        summary,
    })
}

fn rbm_check(cfg: &ExperimentConfig) -> Result<Output> {
    let spec = match &cfg.rbm {
        Some(p) => RbmSpec::try_from(p.clone())?,
        None => rbm::rbm_params(&cfg.sequence()?)?,
    };
    let residual: Vec<Vec<f64>> = (0..spec.dim())
        .map(|i| spec.skew_residual().row(i).iter().copied().collect())
        .collect();
    let rates = rbm::product_form_rates(&spec);
    let (product_form, eta, error) = match &rates {
        Ok(eta) => (true, Some(eta.clone()), None),
        Err(e) => (false, None, Some(e.to_string())),
    };
    let record = json!({
        "params": spec.params(),
        "stable": spec.is_stable(),
        "pushed_drift": spec.pushed_drift(),
        "skew_relative_error": spec.skew_relative_error(),
        "skew_residual": residual,
        "product_form": product_form,
        "eta": eta,
        "error": error,
    });
    let mut s = String::new();
    let _ = writeln!(s, "rbm-check");
    let _ = writeln!(s, "beta = {:?}", spec.beta());
    let _ = writeln!(s, "gamma = {:?}", rows(spec.gamma()));
    let _ = writeln!(s, "stable = {}", spec.is_stable());
    match rates {
        Ok(eta) => {
            let _ = writeln!(s, "product form: eta = {eta:?}");
        }
        Err(e) => {
            let _ = writeln!(s, "no product form: {e}");
            let _ = writeln!(s, "skew-symmetry residual = {residual:?}");
        }
    }
    Ok(Output {
        files: vec![("report.jsonl".to_string(), format!("{record}\n"))],
        summary: s,
    })
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn tail_bound(cfg: &ExperimentConfig, seed: u64) -> Result<Output> {
    let t = cfg
        .tail
        .as_ref()
        .ok_or_else(|| Error::Config("missing [tail] block".to_string()))?;
    let net = cfg.stable_network()?;
    let plan = TailPipeline {
        t0: t.t0.clone(),
        drift_probes: t.drift_probes.clone(),
        l_probes: t.l_probes.clone(),
        samples_per_state: t.samples,
        thetas: t.thetas.clone(),
        confidence: lyapunov::DEFAULT_CONFIDENCE,
    };
    let certs = lyapunov::tail_certificates(&net, &plan, seed)?;
    if certs.is_empty() {
        return Err(Error::NoCertificate(
            "no drift time produced a usable certificate".to_string(),
        ));
    }
    let mut lines = String::new();
    let mut s = String::new();
    let _ = writeln!(s, "tail-bound  seed={seed}  network={}", net.hash());
    for c in &certs {
        let bounds: Vec<(f64, f64)> = t
            .thresholds
            .iter()
            .map(|&d| {
                let level = c.certificate.k + d;
                c.bound(level).map(|b| (level, b))
            })
            .collect::<Result<_>>()?;
        let record = json!({
            "certificate": c.certificate,
            "functionals": c.functionals,
            "bounds": bounds,
        });
        let _ = writeln!(lines, "{record}");
        let _ = writeln!(
            s,
            "t0={} K={} gamma={:.4} theta={} L1={:.4} L2={:.4}",
            c.certificate.t0,
            c.certificate.k,
            c.certificate.gamma,
            c.functionals.theta,
            c.functionals.l1,
            c.functionals.l2
        );
        for (level, b) in bounds {
            let _ = writeln!(s, "    P(Phi > {level}) <= {b:.6}");
        }
    }
    Ok(Output {
        files: vec![("report.jsonl".to_string(), lines)],
        summary: s,
    })
}
