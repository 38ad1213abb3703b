//! TOML experiment configuration and built-in presets.
//!
//! ```toml
//! [network]
//! routing = [[0.0, 1.0], [0.0, 0.0]]
//!
//! [[network.stations]]
//! arrival = { family = "exponential", rate = 1.0 }
//! service = { family = "exponential", rate = 1.0 }
//!
//! [[network.stations]]
//! service = { family = "exponential", rate = 1.0 }
//!
//! [kappa0]
//! values = [1.0, 1.0]
//!
//! [experiment]
//! n = [100, 400]
//! samples = 5000
//!
//! [output]
//! dir = "results"
//! ```

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DistributionSpec, HeavyTrafficSequence, Network, NetworkSpec, RoutingMatrix, StationSpec};
use crate::rbm::RbmParams;

pub const PRESETS: [&str; 3] = ["mm1", "tandem", "tandem-deterministic"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kappa0 {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// Product form when skew symmetry holds, RBM simulation otherwise.
    #[default]
    Auto,
    ProductForm,
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SojournTarget {
    pub station: usize,
    pub visits: Vec<u32>,
}

fn default_samples() -> usize {
    2000
}
fn default_one() -> usize {
    1
}
fn default_warmup_factor() -> f64 {
    20.0
}
fn default_spacing_factor() -> f64 {
    0.5
}
fn default_moments() -> Vec<u32> {
    vec![1, 2]
}
fn default_tail_grid() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_rbm_samples() -> usize {
    5000
}
fn default_slope_se() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    pub n: Vec<u64>,
    /// Stationary samples per replication and per n.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_one")]
    pub replications: usize,
    /// warmup = warmup_factor * n / kappa_min^2.
    #[serde(default = "default_warmup_factor")]
    pub warmup_factor: f64,
    /// spacing = spacing_factor * n.
    #[serde(default = "default_spacing_factor")]
    pub spacing_factor: f64,
    #[serde(default = "default_moments")]
    pub moments: Vec<u32>,
    /// Per-coordinate thresholds for joint upper-tail comparisons.
    #[serde(default = "default_tail_grid")]
    pub tail_grid: Vec<f64>,
    #[serde(default)]
    pub reference: ReferenceMode,
    /// Also simulate the RBM when the product form is available and compare means.
    #[serde(default)]
    pub cross_validate: bool,
    #[serde(default = "default_rbm_samples")]
    pub rbm_samples: usize,
    /// Slope verdict margin, in standard errors.
    #[serde(default = "default_slope_se")]
    pub slope_se: f64,
    #[serde(default)]
    pub sojourn: Vec<SojournTarget>,
    #[serde(default = "default_samples")]
    pub sojourn_samples: usize,
    /// Keep every `sojourn_thin`-th qualifying job; 0 picks n.
    #[serde(default)]
    pub sojourn_thin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSettings {
    pub z: Vec<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSettings {
    pub t0: Vec<f64>,
    pub drift_probes: Vec<Vec<u64>>,
    #[serde(default)]
    pub l_probes: Vec<Vec<u64>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub thetas: Vec<f64>,
    /// Thresholds above K at which to report the bound.
    #[serde(default)]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub kappa0: Option<Kappa0>,
    pub experiment: ExperimentSettings,
    #[serde(default)]
    pub fluid: Option<FluidSettings>,
    #[serde(default)]
    pub tail: Option<TailSettings>,
    /// Explicit RBM parameters for `rbm-check`, bypassing the network.
    #[serde(default)]
    pub rbm: Option<RbmParams>,
    #[serde(default)]
    pub output: OutputSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file, or a built-in preset when `name` is a preset name
    /// that does not exist as a file.
    pub fn load(name: &str) -> Result<Self> {
        let path = FsPath::new(name);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{name}: {e}")))?;
            return Self::from_toml(&text).map_err(|e| Error::Config(format!("{name}: {e}")));
        }
        preset(name).ok_or_else(|| {
            Error::Config(format!(
                "no config file '{name}' and no preset of that name (presets: {})",
                PRESETS.join(", ")
            ))
        })
    }

    pub fn base_network(&self) -> Result<Network> {
        self.network.clone().validate()
    }

    pub fn sequence(&self) -> Result<HeavyTrafficSequence> {
        let kappa0 = self
            .kappa0
            .as_ref()
            .ok_or_else(|| Error::Config("missing [kappa0] block".to_string()))?;
        HeavyTrafficSequence::new(self.base_network()?, kappa0.values.clone())
    }

    /// The network itself if stable, else the sequence member at the first n.
    pub fn stable_network(&self) -> Result<Network> {
        let base = self.base_network()?;
        if base.is_stable() {
            return Ok(base);
        }
        let n = *self
            .experiment
            .n
            .first()
            .ok_or_else(|| Error::Config("experiment.n is empty".to_string()))?;
        self.sequence()?.member(n)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.n.is_empty() {
            return Err(Error::Config("experiment.n must list at least one n".to_string()));
        }
        if e.samples == 0 || e.replications == 0 {
            return Err(Error::Config("samples and replications must be positive".to_string()));
        }
        if !(e.warmup_factor >= 0.0 && e.spacing_factor > 0.0) {
            return Err(Error::Config(
                "warmup_factor must be >= 0 and spacing_factor > 0".to_string(),
            ));
        }
        if e.moments.contains(&0) {
            return Err(Error::Config("moment orders must be positive".to_string()));
        }
        Ok(())
    }
}

fn exp(rate: f64) -> DistributionSpec {
    DistributionSpec::Exponential { rate }
}

fn tandem_spec(service1: DistributionSpec) -> NetworkSpec {
    NetworkSpec {
        stations: vec![
            StationSpec {
                name: Some("first".to_string()),
                arrival: Some(exp(1.0)),
                service: service1,
            },
            StationSpec {
                name: Some("second".to_string()),
                arrival: None,
                service: exp(1.0),
            },
        ],
        routing: RoutingMatrix::tandem(2),
    }
}

fn settings(n: Vec<u64>, sojourn: Vec<SojournTarget>) -> ExperimentSettings {
    ExperimentSettings {
        n,
        samples: default_samples(),
        replications: 1,
        warmup_factor: default_warmup_factor(),
        spacing_factor: default_spacing_factor(),
        moments: default_moments(),
        tail_grid: default_tail_grid(),
        reference: ReferenceMode::Auto,
        cross_validate: false,
        rbm_samples: default_rbm_samples(),
        slope_se: default_slope_se(),
        sojourn,
        sojourn_samples: default_samples(),
        sojourn_thin: 0,
    }
}

/// Built-in configurations: a critical single exponential queue, the
/// exponential two-station tandem, and the tandem with deterministic
/// service at the first station.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let (network, kappa0, n, sojourn, fluid_z) = match name {
        "mm1" => (
            NetworkSpec::mm1(1.0, 1.0),
            vec![1.0],
            vec![64, 256, 1024],
            vec![SojournTarget {
                station: 0,
                visits: vec![1],
            }],
            vec![3.0],
        ),
        "tandem" => (
            tandem_spec(exp(1.0)),
            vec![1.0, 1.0],
            vec![100, 400],
            vec![SojournTarget {
                station: 0,
                visits: vec![1, 1],
            }],
            vec![1.0, 0.0],
        ),
        "tandem-deterministic" => (
            tandem_spec(DistributionSpec::Deterministic { value: 1.0 }),
            vec![1.0, 1.0],
            vec![100, 400],
            vec![SojournTarget {
                station: 0,
                visits: vec![1, 1],
            }],
            vec![1.0, 0.0],
        ),
        _ => return None,
    };
    let tail = (name == "mm1").then(|| TailSettings {
        t0: vec![10.0, 20.0],
        drift_probes: vec![vec![20], vec![40], vec![80]],
        l_probes: vec![vec![0], vec![1], vec![5]],
        samples: 1000,
        thetas: vec![0.02, 0.05, 0.1, 0.2],
        thresholds: vec![10.0, 20.0, 50.0],
    });
    Some(ExperimentConfig {
        network,
        kappa0: Some(Kappa0 { values: kappa0 }),
        experiment: settings(n, sojourn),
        fluid: Some(FluidSettings {
            z: fluid_z,
            horizon: None,
            step: None,
        }),
        tail,
        rbm: None,
        output: OutputSettings::default(),
    })
}
