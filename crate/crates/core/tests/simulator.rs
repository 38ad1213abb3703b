mod common;

use std::collections::HashMap;

use gjn::network::NetworkSpec;
use gjn::sim::{self, EventKind, SamplingPlan, SojournPlan};
use gjn::stats;

fn mm1_half() -> gjn::network::Network {
    NetworkSpec::mm1(0.5, 1.0).validate().unwrap()
}

#[test]
fn mm1_stationary_law_is_geometric() {
    let net = mm1_half();
    let mut plan = SamplingPlan::defaults(&net, 4000);
    plan.replications = 4;
    let set = sim::stationary_sample(&net, &plan, 11).unwrap();
    let q = set.column(0);
    let se = stats::batch_means_se(&q, 20);
    assert!(
        (stats::mean(&q) - 1.0).abs() < 4.0 * se,
        "mean {} se {se}",
        stats::mean(&q)
    );
    let n = q.len() as f64;
    for k in 0..5 {
        let exact = 0.5f64.powi(k + 1);
        let freq = q.iter().filter(|&&v| v == k as f64).count() as f64 / n;
        let sd = (exact * (1.0 - exact) / n).sqrt();
        assert!((freq - exact).abs() < 5.0 * sd, "P(Q = {k}): {freq} vs {exact}");
    }
}

#[test]
fn busy_fraction_matches_utilization() {
    let net = mm1_half();
    let traj = sim::simulate(&net, 50_000.0, 5, &[0], &[]).unwrap();
    let frac = traj.busy()[0] / traj.horizon;
    assert!((frac - 0.5).abs() < 0.02, "busy fraction {frac}");
}

#[test]
fn tandem_means_match_jackson() {
    let net = common::tandem(0.5, common::exp(1.0), common::exp(1.0))
        .validate()
        .unwrap();
    let mut plan = SamplingPlan::defaults(&net, 3000);
    plan.replications = 4;
    let set = sim::stationary_sample(&net, &plan, 17).unwrap();
    for j in 0..2 {
        let col = set.column(j);
        let se = stats::batch_means_se(&col, 20);
        assert!(
            (stats::mean(&col) - 1.0).abs() < 4.0 * se,
            "station {j}: {}",
            stats::mean(&col)
        );
    }
    let r = stats::correlation(&set.column(0), &set.column(1));
    assert!(r.abs() < 0.06, "correlation {r}");
}

#[test]
fn littles_law_for_single_queue() {
    let net = mm1_half();
    let plan = SojournPlan {
        warmup: 100.0,
        n_samples: 4000,
        thin: 1,
        replications: 4,
    };
    let set = sim::sojourn_times(&net, 0, &[1], &plan, 23).unwrap();
    let w = set.column(0);
    let se = stats::batch_means_se(&w, 20);
    // L = lambda W with L = 1 and lambda = 1/2.
    assert!(
        (stats::mean(&w) - 2.0).abs() < 4.0 * se,
        "mean sojourn {} se {se}",
        stats::mean(&w)
    );
}

#[test]
fn tandem_sojourns_from_event_log() {
    let net = common::tandem(0.5, common::exp(1.0), common::exp(1.0))
        .validate()
        .unwrap();
    let traj = sim::simulate(&net, 40_000.0, 29, &[0, 0], &[]).unwrap();
    let mut born = HashMap::new();
    let mut order = Vec::new();
    let mut sojourns = Vec::new();
    for e in &traj.events {
        match (e.station, e.kind) {
            (0, EventKind::Arrival) => {
                born.insert(e.job, e.time);
            }
            (0, EventKind::Departure { to }) => assert_eq!(to, Some(1)),
            (1, EventKind::Departure { to: None }) => {
                let start = born.remove(&e.job).expect("job left without arriving");
                order.push(e.job);
                if start > 1000.0 {
                    sojourns.push(e.time - start);
                }
            }
            other => panic!("unexpected event {other:?}"),
        }
    }
    // Single-server FIFO stations in series preserve the arrival order.
    assert!(order.windows(2).all(|w| w[0] < w[1]));
    let se = stats::batch_means_se(&sojourns, 20);
    assert!(
        (stats::mean(&sojourns) - 4.0).abs() < 4.0 * se,
        "mean {}",
        stats::mean(&sojourns)
    );

    let plan = SojournPlan {
        warmup: 1000.0,
        n_samples: 4000,
        thin: 1,
        replications: 2,
    };
    let direct = sim::sojourn_times(&net, 0, &[1, 1], &plan, 31).unwrap().column(0);
    let se = stats::batch_means_se(&direct, 20);
    assert!(
        (stats::mean(&direct) - 4.0).abs() < 4.0 * se,
        "sojourn_times mean {}",
        stats::mean(&direct)
    );
}

#[test]
fn queue_lengths_in_log_follow_events() {
    let net = common::tandem(0.8, common::exp(1.0), common::exp(1.25))
        .validate()
        .unwrap();
    let traj = sim::simulate(&net, 2000.0, 3, &[2, 1], &[]).unwrap();
    let mut q = vec![2i64, 1];
    for e in &traj.events {
        match e.kind {
            EventKind::Arrival => q[e.station] += 1,
            EventKind::Departure { to } => {
                q[e.station] -= 1;
                if let Some(k) = to {
                    q[k] += 1;
                }
            }
        }
        assert!(q.iter().all(|&v| v >= 0));
        assert_eq!(q, e.q.iter().map(|&v| v as i64).collect::<Vec<_>>());
    }
    assert_eq!(traj.final_state.q, q.iter().map(|&v| v as u64).collect::<Vec<_>>());
}

#[test]
fn same_seed_same_log_different_seed_different_log() {
    let net = mm1_half();
    let a = sim::simulate(&net, 500.0, 1, &[0], &[]).unwrap();
    let b = sim::simulate(&net, 500.0, 1, &[0], &[]).unwrap();
    let c = sim::simulate(&net, 500.0, 2, &[0], &[]).unwrap();
    assert_eq!(a.events_to_delimited(), b.events_to_delimited());
    assert_ne!(a.events_to_delimited(), c.events_to_delimited());
}

#[test]
fn output_grid_samples_queue_lengths() {
    let net = mm1_half();
    let grid: Vec<f64> = (0..=100).map(|i| i as f64).collect();
    let traj = sim::simulate(&net, 100.0, 9, &[3], &grid).unwrap();
    let path = traj.sampled.unwrap();
    for (i, &t) in grid.iter().enumerate() {
        let expected = traj
            .events
            .iter()
            .take_while(|e| e.time <= t)
            .last()
            .map_or(3, |e| e.q[0]);
        assert_eq!(path.get(i, 0), expected as f64, "t = {t}");
    }
}
