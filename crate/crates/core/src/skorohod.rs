//! Oblique reflection (Skorohod) mapping for discretized paths.
//!
//! Given an input path `x` with `x(0) >= 0` and a routing matrix `P`, the
//! solver returns the regulator `y` (nondecreasing, `y(0) = 0`) and the
//! reflected path `q = x + [I - P']y >= 0`, with `y_j` increasing only when
//! `q_j = 0`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::RoutingMatrix;

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    PiecewiseConstant,
    PiecewiseLinear,
}

impl Interpolation {
    fn as_str(self) -> &'static str {
        match self {
            Interpolation::PiecewiseConstant => "piecewise-constant",
            Interpolation::PiecewiseLinear => "piecewise-linear",
        }
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "piecewise-constant" => Ok(Interpolation::PiecewiseConstant),
            "piecewise-linear" => Ok(Interpolation::PiecewiseLinear),
            other => Err(Error::InvalidArgument(format!("unknown interpolation '{other}'"))),
        }
    }
}

/// A J-dimensional trajectory sampled on a strictly increasing time grid.
///
/// Values are stored row-major: row `i` holds the value at `times[i]`.
/// A path may also carry, for each grid interval `(t[i-1], t[i]]`, the
/// infimum of every coordinate over that interval. The reflection solver
/// then regulates against those infima rather than the grid values alone,
/// which is how Brownian inputs keep their within-step excursions.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    times: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
    interpolation: Interpolation,
    interval_min: Option<Vec<f64>>,
}

impl Path {
    pub fn new(times: Vec<f64>, rows: Vec<Vec<f64>>, interpolation: Interpolation) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("ragged path rows".to_string()));
        }
        Self::from_flat(times, rows.into_iter().flatten().collect(), dim, interpolation)
    }

    pub fn from_flat(times: Vec<f64>, values: Vec<f64>, dim: usize, interpolation: Interpolation) -> Result<Self> {
        if times.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument(
                "path needs at least one point and one dimension".to_string(),
            ));
        }
        if values.len() != times.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: times.len() * dim,
                actual: values.len(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(
                "time grid must be strictly increasing".to_string(),
            ));
        }
        Ok(Path {
            times,
            values,
            dim,
            interpolation,
            interval_min: None,
        })
    }

    /// Uniform grid 0, step, 2 step, ... covering `horizon`, values from `f`.
    pub fn from_fn(
        horizon: f64,
        step: f64,
        dim: usize,
        interpolation: Interpolation,
        mut f: impl FnMut(f64) -> Vec<f64>,
    ) -> Result<Self> {
        let times = uniform_grid(horizon, step)?;
        let mut values = Vec::with_capacity(times.len() * dim);
        for &t in &times {
            let v = f(t);
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            values.extend(v);
        }
        Self::from_flat(times, values, dim, interpolation)
    }

    /// Attaches per-interval infima, row-major with one row per grid point;
    /// row 0 is ignored. Each infimum is clamped to at most both endpoints.
    pub fn with_interval_minima(mut self, mut minima: Vec<f64>) -> Result<Self> {
        if minima.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: minima.len(),
            });
        }
        minima[..self.dim].copy_from_slice(&self.values[..self.dim]);
        for i in 1..self.len() {
            for j in 0..self.dim {
                let idx = i * self.dim + j;
                let ends = self.values[idx].min(self.values[idx - self.dim]);
                minima[idx] = minima[idx].min(ends);
            }
        }
        self.interval_min = Some(minima);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interval_minima(&self) -> Option<&[f64]> {
        self.interval_min.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.len() - 1)
    }

    /// Coordinate `j` as a vector over the grid.
    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i, j)).collect()
    }

    /// Value at an arbitrary time, per the interpolation tag; clamps outside the grid.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            return self.row(0).to_vec();
        }
        let i = idx - 1;
        if i + 1 >= self.len() || self.interpolation == Interpolation::PiecewiseConstant {
            return self.row(i).to_vec();
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        self.row(i)
            .iter()
            .zip(self.row(i + 1))
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Lower value of coordinate `j` used at grid point `i` by the solver.
    fn floor_value(&self, i: usize, j: usize) -> f64 {
        match &self.interval_min {
            Some(m) if i > 0 => m[i * self.dim + j],
            _ => self.values[i * self.dim + j],
        }
    }

    /// Delimited text: a `# interpolation=...` line, a header `t,x1,...,xJ`,
    /// then one row per grid point.
    pub fn to_delimited(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# interpolation={}", self.interpolation.as_str());
        out.push('t');
        for j in 0..self.dim {
            let _ = write!(out, ",x{}", j + 1);
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.times[i]);
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_delimited(text: &str) -> Result<Self> {
        let mut interpolation = Interpolation::PiecewiseConstant;
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut dim = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(tag) = rest.trim().strip_prefix("interpolation=") {
                    interpolation = tag.parse()?;
                }
                continue;
            }
            if line.starts_with('t') {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("bad number '{f}': {e}")))
                })
                .collect::<Result<_>>()?;
            if fields.len() < 2 {
                return Err(Error::InvalidArgument(format!("row '{line}' has no values")));
            }
            let d = fields.len() - 1;
            if *dim.get_or_insert(d) != d {
                return Err(Error::InvalidArgument("ragged path rows".to_string()));
            }
            times.push(fields[0]);
            values.extend_from_slice(&fields[1..]);
        }
        Path::from_flat(times, values, dim.unwrap_or(0), interpolation)
    }
}

/// Grid 0, step, ..., ending exactly at `horizon`.
pub fn uniform_grid(horizon: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need step > 0 and horizon >= 0, got step={step}, horizon={horizon}"
        )));
    }
    let n = (horizon / step - 1e-9).ceil().max(0.0) as usize;
    let mut times: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    if n > 0 {
        times[n] = horizon;
    }
    Ok(times)
}

/// Regulator and reflected paths returned by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionSolution {
    pub y: Path,
    pub q: Path,
    /// Sup-norm change of the last fixed-point sweep.
    pub residual: f64,
    pub iterations: usize,
}

/// Outcome of checking a solution against the reflection conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    pub min_q: f64,
    pub identity_error: f64,
    pub y_starts_at_zero: bool,
    pub y_monotone: bool,
    /// Per coordinate, sum over grid points of q_j * (increase of y_j).
    pub complementarity: Vec<f64>,
    pub complementarity_tol: f64,
}

impl InvariantReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.min_q >= -tol
            && self.identity_error <= tol * 10.0
            && self.y_starts_at_zero
            && self.y_monotone
            && self.complementarity.iter().all(|&c| c <= self.complementarity_tol)
    }
}

impl ReflectionSolution {
    /// Checks the solution against `x`. With interval minima present,
    /// complementarity is measured on the regulated interval infima.
    pub fn check(&self, x: &Path, routing: &RoutingMatrix, tol: f64) -> InvariantReport {
        let dim = x.dim();
        let n = x.len();
        let mut min_q = f64::INFINITY;
        let mut identity_error = 0.0f64;
        let mut y_monotone = true;
        let mut complementarity = vec![0.0; dim];
        let mut max_dy = 0.0f64;
        for i in 0..n {
            for j in 0..dim {
                let py: f64 = (0..dim).map(|k| routing.get(k, j) * self.y.get(i, k)).sum();
                let q = self.q.get(i, j);
                min_q = min_q.min(q);
                let expected = x.get(i, j) + self.y.get(i, j) - py;
                identity_error = identity_error.max((q - expected).abs());
                if i > 0 {
                    let dy = self.y.get(i, j) - self.y.get(i - 1, j);
                    if dy < -tol {
                        y_monotone = false;
                    }
                    max_dy = max_dy.max(dy.abs());
                    let q_low = x.floor_value(i, j) + self.y.get(i, j) - py;
                    complementarity[j] += q_low.max(0.0) * dy.max(0.0);
                }
            }
        }
        let y_starts_at_zero = self.y.row(0).iter().all(|&v| v.abs() <= tol);
        // Per-step tolerances accumulate along the grid.
        let complementarity_tol = tol * n as f64 * max_dy.max(1.0);
        InvariantReport {
            min_q,
            identity_error,
            y_starts_at_zero,
            y_monotone,
            complementarity,
            complementarity_tol,
        }
    }
}

/// Iteration cap: ten times the sweeps a contraction with factor sigma needs
/// to reach `tol`, with a floor of 100.
pub fn iteration_cap(routing: &RoutingMatrix, tol: f64) -> usize {
    let row_bound = (0..routing.dim())
        .map(|j| (0..routing.dim()).map(|k| routing.get(j, k)).sum::<f64>())
        .fold(0.0, f64::max);
    let sigma = row_bound.min(routing.spectral_radius_estimate());
    if sigma >= 1.0 - 1e-12 {
        return 1_000_000;
    }
    if sigma <= 0.0 {
        return 100;
    }
    let sweeps = (tol.ln() / sigma.ln()).ceil();
    ((10.0 * sweeps) as usize).max(100)
}

/// Solves the reflection problem by iterating
/// `y_j(t_i) <- max_{s <= t_i} [(P'y)_j(s) - x_j(s)]^+` from `y = 0` until
/// the sup-norm change is at most `tol`.
pub fn reflect(x: &Path, routing: &RoutingMatrix, tol: f64) -> Result<ReflectionSolution> {
    fixed_point(x, routing, tol, |_| {})
}

fn fixed_point(
    x: &Path,
    routing: &RoutingMatrix,
    tol: f64,
    mut observe: impl FnMut(&[f64]),
) -> Result<ReflectionSolution> {
    let dim = x.dim();
    if routing.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: routing.dim(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if let Some(j) = x.row(0).iter().position(|&v| v < -tol) {
        return Err(Error::InvalidArgument(format!(
            "x(0) must be nonnegative; coordinate {j} is {}",
            x.get(0, j)
        )));
    }
    let n = x.len();
    // inflow[j] lists (k, p_kj) with p_kj > 0, i.e. the nonzero entries of row j of P'.
    let inflow: Vec<Vec<(usize, f64)>> = (0..dim)
        .map(|j| {
            (0..dim)
                .filter_map(|k| {
                    let p = routing.get(k, j);
                    (p > 0.0).then_some((k, p))
                })
                .collect()
        })
        .collect();
    let floor: Vec<f64> = (0..n)
        .flat_map(|i| (0..dim).map(move |j| (i, j)))
        .map(|(i, j)| x.floor_value(i, j))
        .collect();

    let cap = iteration_cap(routing, tol);
    let mut y = vec![0.0; n * dim];
    let mut next = vec![0.0; n * dim];
    let mut iterations = 0;
    let mut change;
    loop {
        iterations += 1;
        change = 0.0f64;
        for j in 0..dim {
            let mut running = 0.0f64;
            for i in 0..n {
                let row = i * dim;
                let mut push = 0.0;
                for &(k, p) in &inflow[j] {
                    push += p * y[row + k];
                }
                running = running.max(push - floor[row + j]);
                next[row + j] = running;
                change = change.max((running - y[row + j]).abs());
            }
        }
        std::mem::swap(&mut y, &mut next);
        observe(&y);
        if change <= tol {
            break;
        }
        if iterations >= cap {
            return Err(Error::NonConvergence { iterations, change });
        }
    }

    let mut q = vec![0.0; n * dim];
    for i in 0..n {
        let row = i * dim;
        for j in 0..dim {
            let mut push = 0.0;
            for &(k, p) in &inflow[j] {
                push += p * y[row + k];
            }
            q[row + j] = x.values[row + j] + y[row + j] - push;
        }
    }
    let times = x.times.clone();
    Ok(ReflectionSolution {
        y: Path::from_flat(times.clone(), y, dim, x.interpolation)?,
        q: Path::from_flat(times, q, dim, x.interpolation)?,
        residual: change,
        iterations,
    })
}

/// Closed-form one-dimensional reflection, y(t) = sup_{s <= t} (-x(s))^+.
pub fn reflect_1d(x: &Path) -> Result<ReflectionSolution> {
    if x.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: x.dim(),
        });
    }
    let n = x.len();
    let mut y = Vec::with_capacity(n);
    let mut running = 0.0f64;
    for i in 0..n {
        running = running.max(-x.floor_value(i, 0));
        y.push(running);
    }
    let q: Vec<f64> = x.values.iter().zip(&y).map(|(a, b)| a + b).collect();
    Ok(ReflectionSolution {
        y: Path::from_flat(x.times.clone(), y, 1, x.interpolation)?,
        q: Path::from_flat(x.times.clone(), q, 1, x.interpolation)?,
        residual: 0.0,
        iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path1(times: &[f64], xs: &[f64]) -> Path {
        Path::from_flat(times.to_vec(), xs.to_vec(), 1, Interpolation::PiecewiseConstant).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn pure_downward_drift() {
        let x = path1(&[0.0, 1.0, 2.0], &[0.0, -1.0, -2.0]);
        let sol = reflect(&x, &RoutingMatrix::zeros(1), DEFAULT_TOL).unwrap();
        assert_close(sol.y.values(), &[0.0, 1.0, 2.0], 1e-12);
        assert_close(sol.q.values(), &[0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn hand_solved_1d_path() {
        let x = path1(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, -1.0, 0.5]);
        for sol in [
            reflect(&x, &RoutingMatrix::zeros(1), DEFAULT_TOL).unwrap(),
            reflect_1d(&x).unwrap(),
        ] {
            assert_close(sol.y.values(), &[0.0, 0.0, 1.0, 1.0], 1e-12);
            assert_close(sol.q.values(), &[0.0, 1.0, 0.0, 1.5], 1e-12);
        }
    }

    #[test]
    fn tandem_fixed_point() {
        let x = Path::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![0.0, 0.0], vec![-1.0, 0.0], vec![-2.0, 0.0]],
            Interpolation::PiecewiseConstant,
        )
        .unwrap();
        let p = RoutingMatrix::tandem(2);
        let sol = reflect(&x, &p, DEFAULT_TOL).unwrap();
        assert_close(&sol.y.component(0), &[0.0, 1.0, 2.0], 1e-12);
        assert_close(&sol.y.component(1), &[0.0, 1.0, 2.0], 1e-12);
        assert_close(sol.q.values(), &[0.0; 6], 1e-12);
        assert!(sol.check(&x, &p, DEFAULT_TOL).holds(DEFAULT_TOL));
    }

    #[test]
    fn nonnegative_input_needs_no_regulation() {
        let x = path1(&[0.0, 1.0, 2.0], &[0.5, 2.0, 0.0]);
        let sol = reflect_1d(&x).unwrap();
        assert_eq!(sol.y.values(), &[0.0, 0.0, 0.0]);
        assert_eq!(sol.q.values(), x.values());
    }

    #[test]
    fn reflect_1d_rejects_higher_dimensions() {
        let x = Path::new(vec![0.0], vec![vec![0.0, 0.0]], Interpolation::PiecewiseConstant).unwrap();
        assert!(matches!(
            reflect_1d(&x),
            Err(Error::DimensionMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn negative_start_is_rejected() {
        let x = path1(&[0.0, 1.0], &[-1.0, 0.0]);
        assert!(matches!(
            reflect(&x, &RoutingMatrix::zeros(1), DEFAULT_TOL),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn random_walk_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs = vec![0.0];
        for _ in 1..1000 {
            let last = *xs.last().unwrap();
            xs.push(last + rng.random_range(-1.0..1.0));
        }
        let times: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let x = path1(&times, &xs);
        let a = reflect(&x, &RoutingMatrix::zeros(1), DEFAULT_TOL).unwrap();
        let b = reflect_1d(&x).unwrap();
        assert_close(a.q.values(), b.q.values(), 1e-12);
        assert_close(a.y.values(), b.y.values(), 1e-12);
    }

    #[test]
    fn iterates_increase_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = RoutingMatrix::new(vec![vec![0.1, 0.5, 0.2], vec![0.3, 0.0, 0.4], vec![0.2, 0.2, 0.3]]).unwrap();
        let n = 200;
        let mut rows = vec![vec![1.0, 0.5, 0.0]];
        for _ in 1..n {
            let last = rows.last().unwrap().clone();
            rows.push(last.iter().map(|v| v + rng.random_range(-1.0..0.8)).collect());
        }
        let x = Path::new(
            (0..n).map(|i| i as f64).collect(),
            rows,
            Interpolation::PiecewiseConstant,
        )
        .unwrap();
        let mut prev: Option<Vec<f64>> = None;
        let mut sweeps = 0;
        let sol = fixed_point(&x, &p, DEFAULT_TOL, |y| {
            if let Some(p) = &prev {
                assert!(y.iter().zip(p).all(|(a, b)| *a >= *b - 1e-12));
            }
            prev = Some(y.to_vec());
            sweeps += 1;
        })
        .unwrap();
        assert_eq!(sweeps, sol.iterations);
        assert!(sol.check(&x, &p, DEFAULT_TOL).holds(DEFAULT_TOL));
    }

    #[test]
    fn interval_minima_regulate_within_steps() {
        // The input dips to -1 between grid points but both endpoints are 0.
        let x = path1(&[0.0, 1.0], &[0.0, 0.0])
            .with_interval_minima(vec![0.0, -1.0])
            .unwrap();
        let sol = reflect_1d(&x).unwrap();
        assert_close(sol.q.values(), &[0.0, 1.0], 1e-12);
        let sol2 = reflect(&x, &RoutingMatrix::zeros(1), DEFAULT_TOL).unwrap();
        assert_close(sol2.q.values(), &[0.0, 1.0], 1e-12);
        assert!(sol2.check(&x, &RoutingMatrix::zeros(1), DEFAULT_TOL).holds(DEFAULT_TOL));
    }

    #[test]
    fn delimited_round_trip() {
        let x = Path::new(
            vec![0.0, 0.5, 1.25],
            vec![vec![1.0, -2.5], vec![0.1, 3.0], vec![1e-17, 7.0]],
            Interpolation::PiecewiseLinear,
        )
        .unwrap();
        let text = x.to_delimited();
        assert!(text.starts_with("# interpolation=piecewise-linear\nt,x1,x2\n"));
        assert_eq!(Path::from_delimited(&text).unwrap(), x);
    }

    #[test]
    fn value_at_interpolates() {
        let x = Path::new(
            vec![0.0, 2.0],
            vec![vec![0.0], vec![4.0]],
            Interpolation::PiecewiseLinear,
        )
        .unwrap();
        assert_eq!(x.value_at(0.5), vec![1.0]);
        assert_eq!(x.value_at(5.0), vec![4.0]);
        let c = Path::new(
            vec![0.0, 2.0],
            vec![vec![0.0], vec![4.0]],
            Interpolation::PiecewiseConstant,
        )
        .unwrap();
        assert_eq!(c.value_at(1.9), vec![0.0]);
        assert_eq!(c.value_at(2.0), vec![4.0]);
    }

    #[test]
    fn grid_rejects_nonincreasing_times() {
        assert!(Path::from_flat(vec![0.0, 0.0], vec![0.0, 0.0], 1, Interpolation::PiecewiseConstant).is_err());
        let g = uniform_grid(1.0, 0.3).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn cap_has_floor_and_handles_unit_row_sums() {
        assert_eq!(iteration_cap(&RoutingMatrix::zeros(2), 1e-10), 100);
        assert_eq!(iteration_cap(&RoutingMatrix::tandem(2), 1e-10), 100);
        let p = RoutingMatrix::new(vec![vec![0.9]]).unwrap();
        assert_eq!(iteration_cap(&p, 1e-10), 2190);
    }
}
