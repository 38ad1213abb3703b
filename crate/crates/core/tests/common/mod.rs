#![allow(dead_code)]

use gjn::network::{DistributionSpec, Network, NetworkSpec, RoutingMatrix, StationSpec};
use rand::Rng;

pub fn exp(rate: f64) -> DistributionSpec {
    DistributionSpec::Exponential { rate }
}

/// Two stations in series, external arrivals at the first only.
pub fn tandem(arrival: f64, service1: DistributionSpec, service2: DistributionSpec) -> NetworkSpec {
    NetworkSpec {
        stations: vec![
            StationSpec {
                name: None,
                arrival: Some(exp(arrival)),
                service: service1,
            },
            StationSpec {
                name: None,
                arrival: None,
                service: service2,
            },
        ],
        routing: RoutingMatrix::tandem(2),
    }
}

/// Random substochastic routing with row sums at most `max_row`.
pub fn random_routing<R: Rng>(rng: &mut R, dim: usize, max_row: f64) -> RoutingMatrix {
    let rows = (0..dim)
        .map(|_| {
            let w: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let total: f64 = w.iter().sum();
            let target = rng.random::<f64>() * max_row;
            w.iter().map(|v| v / total * target).collect()
        })
        .collect();
    RoutingMatrix::new(rows).unwrap()
}

/// Random exponential network with every traffic intensity in [0.3, 0.95].
pub fn random_stable_network<R: Rng>(rng: &mut R, max_dim: usize) -> Network {
    let dim = rng.random_range(1..=max_dim);
    let routing = random_routing(rng, dim, 0.9);
    let alpha: Vec<f64> = (0..dim)
        .map(|j| {
            if j == 0 || rng.random::<f64>() < 0.5 {
                rng.random_range(0.1..1.0)
            } else {
                0.0
            }
        })
        .collect();
    let lambda = gjn::network::solve_traffic(&alpha, &routing).unwrap();
    let stations = (0..dim)
        .map(|j| {
            let mu = if lambda[j] > 0.0 {
                lambda[j] / rng.random_range(0.3..0.95)
            } else {
                1.0
            };
            StationSpec {
                name: None,
                arrival: (alpha[j] > 0.0).then(|| exp(alpha[j])),
                service: exp(mu),
            }
        })
        .collect();
    NetworkSpec { stations, routing }.validate().unwrap()
}
