//! Deterministic fluid model: linear input `x(t) = z + (alpha - (I - P')mu) t`
//! pushed through the reflection map.

use crate::error::{Error, Result};
use crate::network::Network;
use crate::skorohod::{self, Interpolation, Path};

#[derive(Debug, Clone, PartialEq)]
pub struct FluidSolution {
    pub z: Vec<f64>,
    /// alpha - (I - P')mu
    pub drift: Vec<f64>,
    pub q: Path,
    pub y: Path,
    /// First grid time after which |q| stays within the drain tolerance.
    pub drain_time: Option<f64>,
    pub drain_tol: f64,
}

impl FluidSolution {
    /// w'q(t) on the grid.
    pub fn workload(&self, w: &[f64]) -> Vec<f64> {
        (0..self.q.len())
            .map(|i| self.q.row(i).iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn fluid_drift(net: &Network) -> Vec<f64> {
    let r = net.routing().reflection();
    let dim = net.dim();
    (0..dim)
        .map(|j| net.alpha()[j] - (0..dim).map(|k| r[(j, k)] * net.mu()[k]).sum::<f64>())
        .collect()
}

fn check_level(net: &Network, z: &[f64]) -> Result<()> {
    if z.len() != net.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.dim(),
            actual: z.len(),
        });
    }
    if z.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(
            "initial fluid level must be nonnegative".to_string(),
        ));
    }
    Ok(())
}

/// w'z / min_j mu_j (1 - rho_j): the time by which the fluid is sure to be empty.
pub fn drain_time_bound(net: &Network, z: &[f64]) -> Result<f64> {
    net.require_stable()?;
    check_level(net, z)?;
    let wz: f64 = net.workload().iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(wz / net.drain_rate())
}

/// 0.01 x drain-time bound, floor 1e-4.
pub fn default_step(net: &Network, z: &[f64]) -> Result<f64> {
    Ok((0.01 * drain_time_bound(net, z)?).max(1e-4))
}

pub fn drain_tolerance(z: &[f64]) -> f64 {
    1e-8 * (1.0 + z.iter().map(|v| v * v).sum::<f64>().sqrt())
}

pub fn fluid_solve(net: &Network, z: &[f64], horizon: f64, step: f64) -> Result<FluidSolution> {
    check_level(net, z)?;
    let drift = fluid_drift(net);
    let x = Path::from_fn(horizon, step, net.dim(), Interpolation::PiecewiseLinear, |t| {
        z.iter().zip(&drift).map(|(a, b)| a + b * t).collect()
    })?;
    let sol = skorohod::reflect(&x, net.routing(), skorohod::DEFAULT_TOL)?;
    let drain_tol = drain_tolerance(z);
    let norm = |i: usize| sol.q.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut drain_time = None;
    for i in (0..sol.q.len()).rev() {
        if norm(i) > drain_tol {
            break;
        }
        drain_time = Some(sol.q.times()[i]);
    }
    Ok(FluidSolution {
        z: z.to_vec(),
        drift,
        q: sol.q,
        y: sol.y,
        drain_time,
        drain_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{DistributionSpec, NetworkSpec, RoutingMatrix, StationSpec};

    fn tandem() -> Network {
        NetworkSpec {
            stations: vec![
                StationSpec {
                    name: None,
                    arrival: Some(DistributionSpec::Exponential { rate: 0.5 }),
                    service: DistributionSpec::Exponential { rate: 1.0 },
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
        .unwrap()
    }

    #[test]
    fn empty_stays_empty() {
        let net = tandem();
        let sol = fluid_solve(&net, &[0.0, 0.0], 5.0, 0.1).unwrap();
        assert!(sol.q.values().iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(sol.drain_time, Some(0.0));
        assert_eq!(drain_time_bound(&net, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn tandem_drains_through_first_station() {
        let net = tandem();
        let sol = fluid_solve(&net, &[1.0, 0.0], 5.0, 0.01).unwrap();
        for i in 0..sol.q.len() {
            let t = sol.q.times()[i];
            assert!((sol.q.get(i, 0) - (1.0 - 0.5 * t).max(0.0)).abs() < 1e-9);
            assert!(sol.q.get(i, 1).abs() < 1e-9);
        }
        assert!((sol.drain_time.unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(net.workload(), &[2.0, 1.0]);
        assert!((drain_time_bound(&net, &[1.0, 0.0]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_station_bound_is_tight() {
        let net = NetworkSpec::mm1(0.5, 1.0).validate().unwrap();
        let sol = fluid_solve(&net, &[3.0], 10.0, 0.01).unwrap();
        assert!((sol.drain_time.unwrap() - 6.0).abs() < 1e-9);
        assert!((drain_time_bound(&net, &[3.0]).unwrap() - 6.0).abs() < 1e-12);
        let doubled = fluid_solve(&net, &[6.0], 20.0, 0.01).unwrap();
        assert!((doubled.drain_time.unwrap() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn unstable_has_no_bound() {
        let net = NetworkSpec::mm1(1.0, 1.0).validate().unwrap();
        assert!(matches!(drain_time_bound(&net, &[1.0]), Err(Error::Unstable { .. })));
    }

    #[test]
    fn default_step_has_floor() {
        let net = tandem();
        assert_eq!(default_step(&net, &[0.0, 0.0]).unwrap(), 1e-4);
        assert!((default_step(&net, &[1.0, 0.0]).unwrap() - 0.04).abs() < 1e-15);
    }
}
