//! Discrete-event simulation of a generalized Jackson network.
//!
//! Each station is a single FIFO server. External arrivals form renewal
//! streams, service times are drawn when service starts, and a job
//! finishing at station `j` moves to `k` with probability `p_jk` or leaves.
//! Runs start fresh: no elapsed interarrival or service age at time zero.
//!
//! # Random streams
//!
//! Every primitive source owns a ChaCha8 substream keyed by the master seed
//! with stream id `(kind << 32) | station`, where kind is 0 for external
//! arrivals, 1 for services and 2 for routing decisions. Replication `r` of
//! a sampling run uses master seed `replication_seed(seed, r)`.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DistributionSpec, Network};
use crate::samples::{SampleKind, SampleMetadata, StationarySampleSet};
use crate::skorohod::{Interpolation, Path};

pub const DEFAULT_MAX_EVENTS: u64 = 20_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Arrival = 0,
    Service = 1,
    Routing = 2,
}

pub fn substream(seed: u64, kind: StreamKind, station: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 32) | station as u64);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically mixes a master seed with a list of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix64(seed), |acc, &l| {
        splitmix64(acc.rotate_left(23) ^ splitmix64(l))
    })
}

pub fn replication_seed(seed: u64, replication: usize) -> u64 {
    derive_seed(seed, &[0x5245_504c, replication as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Arrival,
    /// Service completion; `to` is the next station, `None` when the job leaves.
    Departure {
        to: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub station: usize,
    pub kind: EventKind,
    /// Serial number of the job involved; zero when jobs are not tracked.
    pub job: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub station: usize,
    pub kind: EventKind,
    pub job: u64,
    /// Queue lengths right after the event.
    pub q: Vec<u64>,
}

/// Markov state (Q, elapsed arrival ages, elapsed service ages) plus the
/// event calendar and cumulative busy times.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub time: f64,
    pub q: Vec<u64>,
    pub arrival_age: Vec<f64>,
    pub service_age: Vec<f64>,
    pub next_arrival: Vec<f64>,
    pub next_completion: Vec<f64>,
    pub busy: Vec<f64>,
}

/// Event-driven simulator. Ties are resolved with service completions
/// before external arrivals, then by ascending station index.
pub struct Simulator<'a> {
    net: &'a Network,
    dim: usize,
    now: f64,
    q: Vec<u64>,
    next_arrival: Vec<f64>,
    next_completion: Vec<f64>,
    last_arrival: Vec<f64>,
    service_start: Vec<f64>,
    busy: Vec<f64>,
    cum_routing: Vec<Vec<f64>>,
    rng_arrival: Vec<ChaCha8Rng>,
    rng_service: Vec<ChaCha8Rng>,
    rng_routing: Vec<ChaCha8Rng>,
    queues: Option<Vec<VecDeque<u64>>>,
    next_serial: u64,
    events: u64,
    max_events: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(net: &'a Network, seed: u64, initial_q: &[u64], track_jobs: bool) -> Result<Self> {
        let dim = net.dim();
        if initial_q.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: initial_q.len(),
            });
        }
        let cum_routing = (0..dim)
            .map(|j| {
                let mut acc = 0.0;
                (0..dim)
                    .map(|k| {
                        acc += net.routing().get(j, k);
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut sim = Simulator {
            net,
            dim,
            now: 0.0,
            q: initial_q.to_vec(),
            next_arrival: vec![f64::INFINITY; dim],
            next_completion: vec![f64::INFINITY; dim],
            last_arrival: vec![0.0; dim],
            service_start: vec![0.0; dim],
            busy: vec![0.0; dim],
            cum_routing,
            rng_arrival: (0..dim).map(|j| substream(seed, StreamKind::Arrival, j)).collect(),
            rng_service: (0..dim).map(|j| substream(seed, StreamKind::Service, j)).collect(),
            rng_routing: (0..dim).map(|j| substream(seed, StreamKind::Routing, j)).collect(),
            queues: track_jobs.then(|| vec![VecDeque::new(); dim]),
            next_serial: 1,
            events: 0,
            max_events: DEFAULT_MAX_EVENTS,
        };
        for j in 0..dim {
            if let Some(queues) = sim.queues.as_mut() {
                for _ in 0..initial_q[j] {
                    queues[j].push_back(sim.next_serial);
                    sim.next_serial += 1;
                }
            }
            if let Some(a) = &net.spec().stations[j].arrival {
                sim.next_arrival[j] = a.sample(&mut sim.rng_arrival[j]);
            }
            if sim.q[j] > 0 {
                sim.start_service(j);
            }
        }
        Ok(sim)
    }

    pub fn with_max_events(mut self, max_events: u64) -> Self {
        self.max_events = max_events;
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn q(&self) -> &[u64] {
        &self.q
    }

    pub fn busy(&self) -> &[f64] {
        &self.busy
    }

    pub fn event_count(&self) -> u64 {
        self.events
    }

    pub fn state(&self) -> SimState {
        SimState {
            time: self.now,
            q: self.q.clone(),
            arrival_age: (0..self.dim)
                .map(|j| {
                    if self.net.has_arrivals(j) {
                        self.now - self.last_arrival[j]
                    } else {
                        0.0
                    }
                })
                .collect(),
            service_age: (0..self.dim)
                .map(|j| {
                    if self.q[j] > 0 {
                        self.now - self.service_start[j]
                    } else {
                        0.0
                    }
                })
                .collect(),
            next_arrival: self.next_arrival.clone(),
            next_completion: self.next_completion.clone(),
            busy: self.busy.clone(),
        }
    }

    fn start_service(&mut self, j: usize) {
        let v = self.net.spec().stations[j].service.sample(&mut self.rng_service[j]);
        self.service_start[j] = self.now;
        self.next_completion[j] = self.now + v;
    }

    /// (time, station, is_arrival) of the next event.
    fn next_event(&self) -> Option<(f64, usize, bool)> {
        let mut best: Option<(f64, usize, bool)> = None;
        for j in 0..self.dim {
            let t = self.next_completion[j];
            if t.is_finite() && best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, j, false));
            }
        }
        for j in 0..self.dim {
            let t = self.next_arrival[j];
            if t.is_finite() && best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, j, true));
            }
        }
        best
    }

    pub fn next_event_time(&self) -> f64 {
        self.next_event().map_or(f64::INFINITY, |e| e.0)
    }

    fn advance_clock(&mut self, t: f64) {
        let dt = t - self.now;
        if dt > 0.0 {
            for j in 0..self.dim {
                if self.q[j] > 0 {
                    self.busy[j] += dt;
                }
            }
            self.now = t;
        }
    }

    /// Processes the next event, if any.
    pub fn step(&mut self) -> Result<Option<Event>> {
        let Some((t, j, is_arrival)) = self.next_event() else {
            return Ok(None);
        };
        self.events += 1;
        if self.events > self.max_events {
            return Err(Error::HorizonTooLong(self.max_events));
        }
        self.advance_clock(t);
        let event = if is_arrival {
            let serial = self.enqueue_new(j);
            self.last_arrival[j] = t;
            let a = self.net.spec().stations[j]
                .arrival
                .as_ref()
                .map_or(f64::INFINITY, |d: &DistributionSpec| d.sample(&mut self.rng_arrival[j]));
            self.next_arrival[j] = t + a;
            self.q[j] += 1;
            if self.q[j] == 1 {
                self.start_service(j);
            }
            Event {
                time: t,
                station: j,
                kind: EventKind::Arrival,
                job: serial,
            }
        } else {
            self.q[j] -= 1;
            self.next_completion[j] = f64::INFINITY;
            let serial = self.queues.as_mut().and_then(|qs| qs[j].pop_front()).unwrap_or(0);
            let u: f64 = self.rng_routing[j].random();
            let to = self.cum_routing[j].iter().position(|&c| u < c);
            if let Some(k) = to {
                if let Some(qs) = self.queues.as_mut() {
                    qs[k].push_back(serial);
                }
                self.q[k] += 1;
                if k != j && self.q[k] == 1 {
                    self.start_service(k);
                }
            }
            if self.q[j] > 0 {
                self.start_service(j);
            }
            Event {
                time: t,
                station: j,
                kind: EventKind::Departure { to },
                job: serial,
            }
        };
        Ok(Some(event))
    }

    fn enqueue_new(&mut self, j: usize) -> u64 {
        match self.queues.as_mut() {
            Some(qs) => {
                let serial = self.next_serial;
                self.next_serial += 1;
                qs[j].push_back(serial);
                serial
            }
            None => 0,
        }
    }

    /// Processes every event with time <= `t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: f64, mut on_event: impl FnMut(&Event, &Self)) -> Result<()> {
        while self.next_event_time() <= t {
            if let Some(ev) = self.step()? {
                on_event(&ev, self);
            }
        }
        self.advance_clock(t);
        Ok(())
    }
}

/// Event log, sampled queue-length path and final state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial_q: Vec<u64>,
    pub horizon: f64,
    pub events: Vec<EventRecord>,
    /// Q on the requested output grid (piecewise constant); `None` for an empty grid.
    pub sampled: Option<Path>,
    pub final_state: SimState,
}

impl Trajectory {
    pub fn busy(&self) -> &[f64] {
        &self.final_state.busy
    }

    /// Delimited event log: `time,station,kind,q1,...,qJ`, kind one of
    /// `arrival`, `exit` or `route:<k>`.
    pub fn events_to_delimited(&self) -> String {
        let mut out = String::from("time,station,kind");
        for j in 0..self.initial_q.len() {
            let _ = write!(out, ",q{}", j + 1);
        }
        out.push('\n');
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Arrival => "arrival".to_string(),
                EventKind::Departure { to: None } => "exit".to_string(),
                EventKind::Departure { to: Some(k) } => format!("route:{k}"),
            };
            let _ = write!(out, "{},{},{}", e.time, e.station, kind);
            for v in &e.q {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the network over `[0, horizon]` from a fresh start with `initial_q`
/// jobs, logging every event. Identical inputs give identical logs.
pub fn simulate(net: &Network, horizon: f64, seed: u64, initial_q: &[u64], output_grid: &[f64]) -> Result<Trajectory> {
    simulate_with_budget(net, horizon, seed, initial_q, output_grid, DEFAULT_MAX_EVENTS)
}

pub fn simulate_with_budget(
    net: &Network,
    horizon: f64,
    seed: u64,
    initial_q: &[u64],
    output_grid: &[f64],
    max_events: u64,
) -> Result<Trajectory> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    if output_grid.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
        return Err(Error::InvalidArgument(
            "output grid must lie in [0, horizon]".to_string(),
        ));
    }
    let mut sim = Simulator::new(net, seed, initial_q, true)?.with_max_events(max_events);
    let mut events = Vec::new();
    let mut samples = Vec::with_capacity(output_grid.len() * net.dim());
    let mut log = |ev: &Event, s: &Simulator| {
        events.push(EventRecord {
            time: ev.time,
            station: ev.station,
            kind: ev.kind,
            job: ev.job,
            q: s.q.clone(),
        });
    };
    for &t in output_grid {
        sim.run_until(t, &mut log)?;
        samples.extend(sim.q.iter().map(|&v| v as f64));
    }
    sim.run_until(horizon, &mut log)?;
    let sampled = if output_grid.is_empty() {
        None
    } else {
        Some(Path::from_flat(
            output_grid.to_vec(),
            samples,
            net.dim(),
            Interpolation::PiecewiseConstant,
        )?)
    };
    Ok(Trajectory {
        initial_q: initial_q.to_vec(),
        horizon,
        events,
        sampled,
        final_state: sim.state(),
    })
}

/// The free process X (built from primitive counts) and the regulator
/// Y = mu (t - B) at time zero and after every logged event.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

/// Reconstructs X and Y from the event log alone. Busy time accrues between
/// events exactly when the pre-event queue is nonempty.
pub fn decompose(net: &Network, traj: &Trajectory) -> Decomposition {
    let dim = net.dim();
    let alpha = net.alpha();
    let mu = net.mu();
    let p = |i: usize, j: usize| net.routing().get(i, j);
    let q0: Vec<f64> = traj.initial_q.iter().map(|&v| v as f64).collect();
    let mut arrivals = vec![0.0; dim];
    let mut departures = vec![0.0; dim];
    let mut routed = vec![vec![0.0; dim]; dim];
    let mut busy = vec![0.0; dim];
    let mut prev_q = traj.initial_q.clone();
    let mut prev_t = 0.0;

    let snapshot = |t: f64, arrivals: &[f64], departures: &[f64], routed: &[Vec<f64>], busy: &[f64]| {
        let mut x = vec![0.0; dim];
        let mut y = vec![0.0; dim];
        for j in 0..dim {
            let inflow_rate: f64 = (0..dim).map(|i| mu[i] * p(i, j)).sum();
            let mut v = q0[j] + (alpha[j] + inflow_rate - mu[j]) * t + (arrivals[j] - alpha[j] * t);
            for i in 0..dim {
                v += p(i, j) * (departures[i] - mu[i] * busy[i]);
                v += routed[i][j] - p(i, j) * departures[i];
            }
            v -= departures[j] - mu[j] * busy[j];
            x[j] = v;
            y[j] = mu[j] * (t - busy[j]);
        }
        (x, y)
    };

    let (x0, y0) = snapshot(0.0, &arrivals, &departures, &routed, &busy);
    let mut out = Decomposition {
        times: vec![0.0],
        x: vec![x0],
        y: vec![y0],
        q: vec![q0.clone()],
    };
    for e in &traj.events {
        for j in 0..dim {
            if prev_q[j] > 0 {
                busy[j] += e.time - prev_t;
            }
        }
        match e.kind {
            EventKind::Arrival => arrivals[e.station] += 1.0,
            EventKind::Departure { to } => {
                departures[e.station] += 1.0;
                if let Some(k) = to {
                    routed[e.station][k] += 1.0;
                }
            }
        }
        let (x, y) = snapshot(e.time, &arrivals, &departures, &routed, &busy);
        out.times.push(e.time);
        out.x.push(x);
        out.y.push(y);
        out.q.push(e.q.iter().map(|&v| v as f64).collect());
        prev_q.clone_from(&e.q);
        prev_t = e.time;
    }
    out
}

/// Warmup, spacing, sample count and replication count for steady-state sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub warmup: f64,
    pub spacing: f64,
    pub n_samples: usize,
    pub replications: usize,
}

impl SamplingPlan {
    /// warmup = 50 / min_j mu_j (1 - rho_j), spacing = 5 / min_j mu_j (1 - rho_j).
    pub fn defaults(net: &Network, n_samples: usize) -> Self {
        let rate = net.drain_rate();
        SamplingPlan {
            warmup: 50.0 / rate,
            spacing: 5.0 / rate,
            n_samples,
            replications: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        if !(self.warmup >= 0.0 && self.warmup.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "warmup must be nonnegative, got {}",
                self.warmup
            )));
        }
        if self.n_samples == 0 || self.replications == 0 {
            return Err(Error::InvalidArgument(
                "need at least one sample and one replication".to_string(),
            ));
        }
        Ok(())
    }
}

/// Samples Q at warmup + k spacing, k = 1..n_samples, from one long run per
/// replication. Replications run in parallel and merge in index order.
pub fn stationary_sample(net: &Network, plan: &SamplingPlan, seed: u64) -> Result<StationarySampleSet> {
    net.require_stable()?;
    plan.validate()?;
    let dim = net.dim();
    let seeds: Vec<u64> = (0..plan.replications).map(|r| replication_seed(seed, r)).collect();
    let runs: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&s| {
            let mut sim = Simulator::new(net, s, &vec![0; dim], false)?;
            let mut rows = Vec::with_capacity(plan.n_samples);
            for k in 1..=plan.n_samples {
                sim.run_until(plan.warmup + k as f64 * plan.spacing, |_, _| {})?;
                rows.push(sim.q.iter().map(|&v| v as f64).collect());
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(plan.n_samples * plan.replications);
    let mut replication = Vec::with_capacity(rows.capacity());
    for (r, run) in runs.into_iter().enumerate() {
        replication.extend(std::iter::repeat_n(r, run.len()));
        rows.extend(run);
    }
    Ok(StationarySampleSet {
        metadata: SampleMetadata {
            kind: SampleKind::QueueLength,
            dim,
            warmup: plan.warmup,
            spacing: plan.spacing,
            samples_per_replication: plan.n_samples,
            replications: plan.replications,
            seeds,
            spec_hash: net.hash(),
            scale: 1.0,
            step: None,
            station: None,
            visits: None,
        },
        rows,
        replication,
    })
}

/// Checks that some job entering at `station` can realize exactly `visits`.
///
/// The walk must start at `station`, leave from a station with positive exit
/// probability, stay inside the visited support (reachable from `station`),
/// and balance visit counts along allowed transitions; the last condition is
/// an integral transportation problem solved by max-flow.
pub fn check_visit_vector(net: &Network, station: usize, visits: &[u32]) -> Result<()> {
    let dim = net.dim();
    let fail = |reason: &str| {
        Err(Error::InfeasibleVisits {
            station,
            visits: visits.to_vec(),
            reason: reason.to_string(),
        })
    };
    if visits.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: visits.len(),
        });
    }
    if station >= dim || !net.has_arrivals(station) {
        return fail("station has no external arrivals");
    }
    if visits[station] == 0 {
        return fail("the entry station must be visited at least once");
    }
    let p = net.routing();
    let support: Vec<usize> = (0..dim).filter(|&i| visits[i] > 0).collect();
    let mut reached = vec![false; dim];
    let mut stack = vec![station];
    reached[station] = true;
    while let Some(i) = stack.pop() {
        for &k in &support {
            if !reached[k] && p.get(i, k) > 0.0 {
                reached[k] = true;
                stack.push(k);
            }
        }
    }
    if support.iter().any(|&i| !reached[i]) {
        return fail("some visited station is unreachable from the entry station");
    }
    let total: i64 = visits.iter().map(|&h| h as i64).sum();
    for &last in support.iter().filter(|&&i| p.exit_probability(i) > 1e-15) {
        let m = support.len();
        // nodes: 0 source, 1..=m out-copies, m+1..=2m in-copies, 2m+1 sink
        let sink = 2 * m + 1;
        let mut flow = MaxFlow::new(2 * m + 2);
        for (a, &i) in support.iter().enumerate() {
            let supply = visits[i] as i64 - i64::from(i == last);
            let demand = visits[i] as i64 - i64::from(i == station);
            flow.add_edge(0, 1 + a, supply);
            flow.add_edge(m + 1 + a, sink, demand);
            for (b, &k) in support.iter().enumerate() {
                if p.get(i, k) > 0.0 {
                    flow.add_edge(1 + a, m + 1 + b, total);
                }
            }
        }
        if flow.run(0, sink) == total - 1 {
            return Ok(());
        }
    }
    fail("no walk through the routing graph realizes these visit counts")
}

struct MaxFlow {
    cap: Vec<Vec<i64>>,
}

impl MaxFlow {
    fn new(n: usize) -> Self {
        MaxFlow {
            cap: vec![vec![0; n]; n],
        }
    }

    fn add_edge(&mut self, a: usize, b: usize, c: i64) {
        self.cap[a][b] += c;
    }

    /// Edmonds-Karp.
    fn run(&mut self, s: usize, t: usize) -> i64 {
        let n = self.cap.len();
        let mut total = 0;
        loop {
            let mut parent = vec![usize::MAX; n];
            parent[s] = s;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for v in 0..n {
                    if parent[v] == usize::MAX && self.cap[u][v] > 0 {
                        parent[v] = u;
                        queue.push_back(v);
                    }
                }
            }
            if parent[t] == usize::MAX {
                return total;
            }
            let mut bottleneck = i64::MAX;
            let mut v = t;
            while v != s {
                bottleneck = bottleneck.min(self.cap[parent[v]][v]);
                v = parent[v];
            }
            let mut v = t;
            while v != s {
                let u = parent[v];
                self.cap[u][v] -= bottleneck;
                self.cap[v][u] += bottleneck;
                v = u;
            }
            total += bottleneck;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SojournPlan {
    pub warmup: f64,
    pub n_samples: usize,
    /// Keep every `thin`-th qualifying job, in arrival order.
    pub thin: usize,
    pub replications: usize,
}

struct Tagged {
    serial_order: u64,
    born: f64,
    visits: Vec<u32>,
}

/// Sojourn times of jobs arriving externally at `station` after the warmup
/// whose realized visit counts equal `visits`, in arrival order.
pub fn sojourn_times(
    net: &Network,
    station: usize,
    visits: &[u32],
    plan: &SojournPlan,
    seed: u64,
) -> Result<StationarySampleSet> {
    check_visit_vector(net, station, visits)?;
    if plan.n_samples == 0 || plan.replications == 0 || plan.thin == 0 {
        return Err(Error::InvalidArgument(
            "n_samples, thin and replications must be positive".to_string(),
        ));
    }
    let seeds: Vec<u64> = (0..plan.replications).map(|r| replication_seed(seed, r)).collect();
    let runs: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&s| sojourn_run(net, station, visits, plan, s))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut replication = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        replication.extend(std::iter::repeat_n(r, run.len()));
        rows.extend(run.into_iter().map(|v| vec![v]));
    }
    Ok(StationarySampleSet {
        metadata: SampleMetadata {
            kind: SampleKind::Sojourn,
            dim: 1,
            warmup: plan.warmup,
            spacing: 0.0,
            samples_per_replication: plan.n_samples,
            replications: plan.replications,
            seeds,
            spec_hash: net.hash(),
            scale: 1.0,
            step: None,
            station: Some(station),
            visits: Some(visits.to_vec()),
        },
        rows,
        replication,
    })
}

fn sojourn_run(net: &Network, station: usize, visits: &[u32], plan: &SojournPlan, seed: u64) -> Result<Vec<f64>> {
    let dim = net.dim();
    let wanted = plan.n_samples * plan.thin;
    let mut sim = Simulator::new(net, seed, &vec![0; dim], true)?;
    let mut tagged: HashMap<u64, Tagged> = HashMap::new();
    let mut in_flight: BTreeSet<u64> = BTreeSet::new();
    // Matches keyed by arrival order; trimmed to the `wanted` earliest.
    let mut matched: BTreeMap<u64, f64> = BTreeMap::new();
    let mut order = 0u64;
    loop {
        let Some(ev) = sim.step()? else {
            return Err(Error::InvalidArgument("network ran out of events".to_string()));
        };
        match ev.kind {
            EventKind::Arrival if ev.station == station && ev.time > plan.warmup => {
                let mut v = vec![0; dim];
                v[station] = 1;
                tagged.insert(
                    ev.job,
                    Tagged {
                        serial_order: order,
                        born: ev.time,
                        visits: v,
                    },
                );
                in_flight.insert(order);
                order += 1;
            }
            EventKind::Arrival => {}
            EventKind::Departure { to: Some(k) } => {
                if let Some(t) = tagged.get_mut(&ev.job) {
                    t.visits[k] += 1;
                }
            }
            EventKind::Departure { to: None } => {
                if let Some(t) = tagged.remove(&ev.job) {
                    in_flight.remove(&t.serial_order);
                    if t.visits == visits {
                        matched.insert(t.serial_order, ev.time - t.born);
                        if matched.len() > wanted {
                            matched.pop_last();
                        }
                    }
                }
            }
        }
        if matched.len() == wanted {
            let last = *matched.keys().next_back().expect("nonempty");
            if in_flight.first().is_none_or(|&f| f > last) {
                break;
            }
        }
    }
    Ok(matched.values().step_by(plan.thin).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkSpec, RoutingMatrix, StationSpec};

    fn dd1() -> Network {
        NetworkSpec {
            stations: vec![StationSpec {
                name: None,
                arrival: Some(DistributionSpec::Deterministic { value: 2.0 }),
                service: DistributionSpec::Deterministic { value: 1.0 },
            }],
            routing: RoutingMatrix::zeros(1),
        }
        .validate()
        .unwrap()
    }

    fn exp_tandem(alpha: f64) -> Network {
        NetworkSpec {
            stations: vec![
                StationSpec {
                    name: None,
                    arrival: Some(DistributionSpec::Exponential { rate: alpha }),
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
    fn empty_network_stays_empty() {
        let net = NetworkSpec {
            stations: vec![StationSpec {
                name: None,
                arrival: None,
                service: DistributionSpec::Exponential { rate: 1.0 },
            }],
            routing: RoutingMatrix::zeros(1),
        }
        .validate()
        .unwrap();
        let traj = simulate(&net, 100.0, 1, &[0], &[0.0, 50.0, 100.0]).unwrap();
        assert!(traj.events.is_empty());
        assert_eq!(traj.busy(), &[0.0]);
        assert_eq!(traj.sampled.unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn deterministic_single_server_trace() {
        let net = dd1();
        let traj = simulate(&net, 10.0, 3, &[0], &[]).unwrap();
        let arrivals: Vec<f64> = traj
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Arrival)
            .map(|e| e.time)
            .collect();
        let departures: Vec<f64> = traj
            .events
            .iter()
            .filter(|e| e.kind != EventKind::Arrival)
            .map(|e| e.time)
            .collect();
        assert_eq!(arrivals, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(departures, vec![3.0, 5.0, 7.0, 9.0]);
        // The job arriving at 10 is still in service; it completes at 11.
        assert_eq!(traj.final_state.next_completion, vec![11.0]);
        assert_eq!(traj.busy(), &[4.0]);
        assert_eq!(traj.events.iter().map(|e| e.q[0]).max(), Some(1));
        assert_eq!(traj.final_state.service_age, vec![0.0]);
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let net = exp_tandem(0.8);
        let a = simulate(&net, 200.0, 42, &[3, 1], &[]).unwrap();
        let b = simulate(&net, 200.0, 42, &[3, 1], &[]).unwrap();
        assert_eq!(a.events_to_delimited(), b.events_to_delimited());
        let c = simulate(&net, 200.0, 43, &[3, 1], &[]).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn flow_conservation_per_event() {
        let net = exp_tandem(0.9);
        let traj = simulate(&net, 500.0, 5, &[2, 0], &[]).unwrap();
        let mut prev = traj.initial_q.clone();
        for e in &traj.events {
            let mut expect: Vec<i64> = prev.iter().map(|&v| v as i64).collect();
            match e.kind {
                EventKind::Arrival => expect[e.station] += 1,
                EventKind::Departure { to } => {
                    expect[e.station] -= 1;
                    if let Some(k) = to {
                        expect[k] += 1;
                    }
                }
            }
            let got: Vec<i64> = e.q.iter().map(|&v| v as i64).collect();
            assert_eq!(got, expect);
            prev = e.q.clone();
        }
        let idle0 = traj.horizon - traj.busy()[0];
        assert!(idle0 >= 0.0 && traj.busy()[0] <= traj.horizon);
    }

    #[test]
    fn elapsed_service_age_only_when_busy() {
        let net = exp_tandem(0.9);
        let mut sim = Simulator::new(&net, 8, &[0, 0], false).unwrap();
        for k in 1..200 {
            sim.run_until(k as f64 * 1.7, |_, _| {}).unwrap();
            let st = sim.state();
            for j in 0..2 {
                if st.q[j] == 0 {
                    assert_eq!(st.service_age[j], 0.0);
                }
                assert!(st.arrival_age[j] >= 0.0);
            }
        }
    }

    #[test]
    fn event_budget_is_enforced() {
        let net = exp_tandem(0.9);
        let err = simulate_with_budget(&net, 1e6, 1, &[0, 0], &[], 100).unwrap_err();
        assert_eq!(err, Error::HorizonTooLong(100));
    }

    #[test]
    fn unstable_network_is_refused() {
        let net = NetworkSpec::mm1(2.0, 1.0).validate().unwrap();
        let plan = SamplingPlan::defaults(&NetworkSpec::mm1(0.5, 1.0).validate().unwrap(), 10);
        assert!(matches!(stationary_sample(&net, &plan, 1), Err(Error::Unstable { .. })));
    }

    #[test]
    fn nonpositive_spacing_is_rejected() {
        let net = NetworkSpec::mm1(0.5, 1.0).validate().unwrap();
        let mut plan = SamplingPlan::defaults(&net, 10);
        plan.spacing = 0.0;
        assert!(matches!(
            stationary_sample(&net, &plan, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_arrival_network_samples_zero() {
        let net = NetworkSpec {
            stations: vec![StationSpec {
                name: None,
                arrival: None,
                service: DistributionSpec::Exponential { rate: 1.0 },
            }],
            routing: RoutingMatrix::zeros(1),
        }
        .validate()
        .unwrap();
        let s = stationary_sample(&net, &SamplingPlan::defaults(&net, 50), 1).unwrap();
        assert!(s.rows.iter().all(|r| r[0] == 0.0));
        assert_eq!(s.len(), 50);
    }

    #[test]
    fn visit_vector_feasibility() {
        let net = exp_tandem(0.5);
        assert!(check_visit_vector(&net, 0, &[1, 1]).is_ok());
        assert!(matches!(
            check_visit_vector(&net, 0, &[0, 1]),
            Err(Error::InfeasibleVisits { .. })
        ));
        assert!(matches!(
            check_visit_vector(&net, 0, &[1, 0]),
            Err(Error::InfeasibleVisits { .. })
        ));
        assert!(matches!(
            check_visit_vector(&net, 0, &[2, 1]),
            Err(Error::InfeasibleVisits { .. })
        ));
        assert!(matches!(
            check_visit_vector(&net, 1, &[1, 1]),
            Err(Error::InfeasibleVisits { .. })
        ));

        // Single station with feedback: any number of visits is feasible.
        let mut spec = NetworkSpec::mm1(0.3, 1.0);
        spec.routing = RoutingMatrix::new(vec![vec![0.5]]).unwrap();
        let fb = spec.validate().unwrap();
        assert!(check_visit_vector(&fb, 0, &[3]).is_ok());
    }

    #[test]
    fn deterministic_sojourns_are_service_times() {
        let plan = SojournPlan {
            warmup: 5.0,
            n_samples: 20,
            thin: 1,
            replications: 2,
        };
        let s = sojourn_times(&dd1(), 0, &[1], &plan, 9).unwrap();
        assert_eq!(s.len(), 40);
        assert!(s.rows.iter().all(|r| r[0] == 1.0));
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(replication_seed(1, 0), replication_seed(1, 1));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[1]));
        assert_eq!(derive_seed(7, &[100, 3]), derive_seed(7, &[100, 3]));
    }
}
