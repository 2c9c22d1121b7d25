//! Nelder–Mead simplex search and its stochastic variant with an increasing
//! per-iteration sample size.

use std::cmp::Ordering;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_float, write_table};
use crate::linalg::Mat;
use crate::noise::derive_seed;
use crate::real::Real;

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Seed tag for restart draws; vertex ids never reach it.
const RESTART_TAG: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Tolerance,
    MaxIter,
    Stall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmOptions<T> {
    pub tol_x: T,
    pub tol_f: T,
    pub max_iter: usize,
}

impl<T: Real> Default for NmOptions<T> {
    fn default() -> Self {
        Self {
            tol_x: T::lit(1e-4),
            tol_f: T::lit(1e-6),
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnmOptions<T> {
    pub tol_x: T,
    pub tol_f: T,
    pub max_iter: usize,
    /// Iterations without an accepted (non-shrink) move before a restart,
    /// and the look-back for the incumbent-change stop.
    pub stall_window: usize,
    /// Relative incumbent change below which the search stops as stalled.
    pub stall_tol: T,
    /// Per-coordinate box for restarts.
    pub bounds: Option<Vec<(T, T)>>,
    pub max_restarts: usize,
    pub seed: u64,
}

impl<T: Real> Default for SnmOptions<T> {
    fn default() -> Self {
        Self {
            tol_x: T::lit(1e-4),
            tol_f: T::lit(1e-6),
            max_iter: 200,
            stall_window: 20,
            stall_tol: T::lit(1e-12),
            bounds: None,
            max_restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry<T> {
    pub iter: usize,
    pub best: Vec<T>,
    pub objective: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult<T> {
    pub estimate: Vec<T>,
    pub best_objective: T,
    pub termination: TerminationReason,
    pub iterations: usize,
    /// Objective samples drawn in total.
    pub evaluations: usize,
    pub restarts: usize,
    pub trace: Vec<TraceEntry<T>>,
    /// Free-form echo of the configuration that produced the result.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

impl<T: Real> EstimationResult<T> {
    /// `iter,best_a,best_objective` (one `best_a_i` column per coordinate
    /// when the parameter is a vector).
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.estimate.len();
        let mut header = vec!["iter".to_string()];
        if d == 1 {
            header.push("best_a".into());
        } else {
            header.extend((1..=d).map(|i| format!("best_a_{i}")));
        }
        header.push("best_objective".into());
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = self.trace.iter().map(|e| {
            let mut row = vec![e.iter.to_string()];
            row.extend(e.best.iter().map(|&v| fmt_float(v)));
            row.push(fmt_float(e.objective));
            row
        });
        write_table(w, &refs, rows)
    }
}

/// `N(k) = max(1, ⌊√k⌋)`.
pub fn sample_schedule(k: usize) -> usize {
    let mut r = (k as f64).sqrt() as usize;
    while r * r > k {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= k {
        r += 1;
    }
    r.max(1)
}

/// Running average of objective samples at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMean<T> {
    pub mean: T,
    pub count: usize,
}

impl<T: Real> SampleMean<T> {
    fn empty() -> Self {
        Self { mean: T::zero(), count: 0 }
    }

    /// Incremental update; exact when every sample is equal, and sticky at
    /// `+∞` once a divergent sample appears.
    fn push(&mut self, x: T) {
        let x = if x.is_nan() { T::infinity() } else { x };
        self.count += 1;
        if self.count == 1 || self.mean == T::infinity() || x == T::infinity() {
            self.mean = if self.count == 1 { x } else { T::infinity() };
        } else {
            self.mean = self.mean + (x - self.mean) / T::from_usize_lossy(self.count);
        }
    }
}

/// Vertices with their averaged objective values, sorted best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexState<T> {
    pub vertices: Vec<Vec<T>>,
    pub values: Vec<SampleMean<T>>,
    /// Seed identity of each vertex.
    pub ids: Vec<u64>,
    pub k: usize,
}

impl<T: Real> SimplexState<T> {
    fn new(initial: &[Vec<T>]) -> Result<Self> {
        validate_simplex(initial)?;
        let n = initial.len();
        Ok(Self {
            vertices: initial.to_vec(),
            values: vec![SampleMean::empty(); n],
            ids: (0..n as u64).collect(),
            k: 0,
        })
    }

    fn sort(&mut self) {
        let mut order: Vec<usize> = (0..self.vertices.len()).collect();
        order.sort_by(|&i, &j| cmp_values(self.values[i].mean, self.values[j].mean));
        self.vertices = order.iter().map(|&i| self.vertices[i].clone()).collect();
        self.values = order.iter().map(|&i| self.values[i]).collect();
        self.ids = order.iter().map(|&i| self.ids[i]).collect();
    }

    fn spread_x(&self) -> T {
        let best = &self.vertices[0];
        self.vertices[1..]
            .iter()
            .flat_map(|v| v.iter().zip(best).map(|(&a, &b)| (a - b).abs()))
            .fold(T::zero(), T::max)
    }

    fn spread_f(&self) -> T {
        let worst = self.values.last().map_or(T::zero(), |v| v.mean);
        let s = worst - self.values[0].mean;
        if s.is_nan() {
            T::infinity()
        } else {
            s
        }
    }

    fn converged(&self, tol_x: T, tol_f: T) -> bool {
        self.spread_x() < tol_x && self.spread_f() < tol_f
    }

    fn centroid(&self) -> Vec<T> {
        let d = self.vertices[0].len();
        let count = T::from_usize_lossy(self.vertices.len() - 1);
        (0..d)
            .map(|i| self.vertices[..self.vertices.len() - 1].iter().map(|v| v[i]).sum::<T>() / count)
            .collect()
    }

    fn trace_entry(&self) -> TraceEntry<T> {
        TraceEntry {
            iter: self.k,
            best: self.vertices[0].clone(),
            objective: self.values[0].mean,
        }
    }
}

fn cmp_values<T: Real>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| b.is_nan().cmp(&a.is_nan()))
}

fn validate_simplex<T: Real>(initial: &[Vec<T>]) -> Result<()> {
    let Some(first) = initial.first() else {
        return Err(Error::Config("empty initial simplex".into()));
    };
    let d = first.len();
    if d == 0 || initial.len() != d + 1 || initial.iter().any(|v| v.len() != d) {
        return Err(Error::Config(format!(
            "a simplex in {d} dimensions needs {} vertices of equal length",
            d + 1
        )));
    }
    if initial.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite initial vertex".into()));
    }
    let mut diff = Mat::zeros(d, d);
    for (r, v) in initial[1..].iter().enumerate() {
        for c in 0..d {
            diff[(r, c)] = v[c] - first[c];
        }
    }
    if diff.solve(&Mat::identity(d)).is_err() {
        return Err(Error::Config("degenerate initial simplex".into()));
    }
    Ok(())
}

/// `c + t (c - worst)` for the usual coefficients `t`.
fn along<T: Real>(c: &[T], worst: &[T], t: f64) -> Vec<T> {
    c.iter().zip(worst).map(|(&ci, &wi)| ci + T::lit(t) * (ci - wi)).collect()
}

/// One Nelder–Mead move, with `eval` returning averaged values.
/// Returns `true` when a non-shrink move was accepted.
fn nm_move<T: Real, E>(state: &mut SimplexState<T>, next_id: &mut u64, mut eval: E) -> bool
where
    E: FnMut(&[T], u64) -> SampleMean<T>,
{
    let last = state.vertices.len() - 1;
    let c = state.centroid();
    let worst = state.vertices[last].clone();
    let f_best = state.values[0].mean;
    let f_second = state.values[last - 1].mean;
    let f_worst = state.values[last].mean;
    let mut fresh = |x: Vec<T>| {
        let id = *next_id;
        *next_id += 1;
        let v = eval(&x, id);
        (x, v, id)
    };

    let reflected = fresh(along(&c, &worst, REFLECT));
    let fr = reflected.1.mean;
    let accepted = if fr < f_best {
        let expanded = fresh(along(&c, &worst, EXPAND));
        if expanded.1.mean < fr {
            Some(expanded)
        } else {
            Some(reflected)
        }
    } else if fr < f_second {
        Some(reflected)
    } else if fr < f_worst {
        let outside = fresh(along(&c, &worst, REFLECT * CONTRACT));
        (outside.1.mean <= fr).then_some(outside)
    } else {
        let inside = fresh(along(&c, &worst, -CONTRACT));
        (inside.1.mean < f_worst).then_some(inside)
    };

    match accepted {
        Some((x, v, id)) => {
            state.vertices[last] = x;
            state.values[last] = v;
            state.ids[last] = id;
            true
        }
        None => {
            let best = state.vertices[0].clone();
            for i in 1..=last {
                let x: Vec<T> = best
                    .iter()
                    .zip(&state.vertices[i])
                    .map(|(&b, &v)| b + T::lit(SHRINK) * (v - b))
                    .collect();
                let (x, v, id) = fresh(x);
                state.vertices[i] = x;
                state.values[i] = v;
                state.ids[i] = id;
            }
            false
        }
    }
}

/// Deterministic Nelder–Mead.
pub fn nelder_mead<T: Real, F>(mut objective: F, initial: &[Vec<T>], opts: &NmOptions<T>) -> Result<EstimationResult<T>>
where
    F: FnMut(&[T]) -> T,
{
    let mut state = SimplexState::new(initial)?;
    let mut evaluations = 0usize;
    let mut eval = |x: &[T]| {
        evaluations += 1;
        let mut m = SampleMean::empty();
        m.push(objective(x));
        m
    };
    for i in 0..state.vertices.len() {
        state.values[i] = eval(&state.vertices[i]);
    }
    let mut next_id = state.vertices.len() as u64;
    let mut trace = Vec::new();
    let termination = loop {
        state.k += 1;
        state.sort();
        trace.push(state.trace_entry());
        if state.converged(opts.tol_x, opts.tol_f) {
            break TerminationReason::Tolerance;
        }
        if state.k > opts.max_iter {
            break TerminationReason::MaxIter;
        }
        nm_move(&mut state, &mut next_id, |x, _| eval(x));
    };
    Ok(finish(&state, termination, evaluations, 0, trace))
}

fn finish<T: Real>(
    state: &SimplexState<T>,
    termination: TerminationReason,
    evaluations: usize,
    restarts: usize,
    trace: Vec<TraceEntry<T>>,
) -> EstimationResult<T> {
    EstimationResult {
        estimate: state.vertices[0].clone(),
        best_objective: state.values[0].mean,
        termination,
        iterations: state.k,
        evaluations,
        restarts,
        trace,
        config: serde_json::Value::Null,
    }
}

/// Stochastic Nelder–Mead.
///
/// At iteration `k` every vertex receives `N(k)` fresh samples on top of its
/// running average, and every trial point is averaged over `N(k)` samples.
/// Sample `s` of vertex `id` at iteration `k` uses the seed
/// `derive_seed(opts.seed, [id, k, s])`, so the run does not depend on the
/// order in which samples are computed. When no move has been accepted for
/// `stall_window` iterations, or the simplex has stayed collapsed below
/// `tol_x` that long without meeting `tol_f`, the worst vertex is redrawn
/// uniformly in `bounds`.
pub fn stochastic_nelder_mead<T: Real, F>(
    sampler: F,
    initial: &[Vec<T>],
    opts: &SnmOptions<T>,
) -> Result<EstimationResult<T>>
where
    F: Fn(&[T], u64) -> T,
{
    if let Some(b) = &opts.bounds {
        if b.len() != initial.first().map_or(0, Vec::len) || b.iter().any(|&(lo, hi)| !(hi > lo)) {
            return Err(Error::Config("restart box must give lo < hi for every coordinate".into()));
        }
    }
    if opts.stall_window == 0 {
        return Err(Error::Config("stall_window must be at least 1".into()));
    }
    let mut state = SimplexState::new(initial)?;
    let mut next_id = state.vertices.len() as u64;
    let mut evaluations = 0usize;
    let mut restarts = 0usize;
    let mut trace: Vec<TraceEntry<T>> = Vec::new();
    let mut since_accept = 0usize;
    let mut restart_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[RESTART_TAG]));

    let termination = loop {
        state.k += 1;
        let k = state.k;
        let n_k = sample_schedule(k);
        for i in 0..state.vertices.len() {
            let id = state.ids[i];
            for s in 0..n_k {
                let seed = derive_seed(opts.seed, &[id, k as u64, s as u64]);
                state.values[i].push(sampler(&state.vertices[i], seed));
            }
            evaluations += n_k;
        }
        state.sort();
        trace.push(state.trace_entry());
        if state.converged(opts.tol_x, opts.tol_f) {
            break TerminationReason::Tolerance;
        }
        if k > opts.max_iter {
            break TerminationReason::MaxIter;
        }
        if trace.len() > opts.stall_window {
            let now = trace[trace.len() - 1].objective;
            let then = trace[trace.len() - 1 - opts.stall_window].objective;
            if (now - then).abs() <= opts.stall_tol * T::one().max(now.abs()) {
                break TerminationReason::Stall;
            }
        }
        if since_accept >= opts.stall_window {
            let Some(bounds) = &opts.bounds else {
                return Err(Error::Config(
                    "search stalled and no restart box is configured".into(),
                ));
            };
            if restarts >= opts.max_restarts {
                break TerminationReason::Stall;
            }
            restarts += 1;
            since_accept = 0;
            let last = state.vertices.len() - 1;
            state.vertices[last] = bounds.iter().map(|&(lo, hi)| uniform(&mut restart_rng, lo, hi)).collect();
            state.values[last] = SampleMean::empty();
            state.ids[last] = next_id;
            next_id += 1;
            continue;
        }
        let accepted = nm_move(&mut state, &mut next_id, |x, id| {
            let mut m = SampleMean::empty();
            for s in 0..n_k {
                m.push(sampler(x, derive_seed(opts.seed, &[id, k as u64, s as u64])));
            }
            evaluations += n_k;
            m
        });
        // moves of a collapsed simplex only shuffle noise and are not progress
        let progressed = accepted && state.spread_x() >= opts.tol_x;
        since_accept = if progressed { 0 } else { since_accept + 1 };
    };
    Ok(finish(&state, termination, evaluations, restarts, trace))
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, lo: T, hi: T) -> T {
    let u: f64 = rng.gen();
    lo + (hi - lo) * T::lit(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_floor_sqrt() {
        let want = [(0, 1), (1, 1), (3, 1), (4, 2), (8, 2), (9, 3), (10, 3), (15, 3), (16, 4), (200, 14)];
        for (k, n) in want {
            assert_eq!(sample_schedule(k), n, "k={k}");
        }
    }

    #[test]
    fn mean_is_exact_for_constant_samples() {
        let mut m = SampleMean::empty();
        for _ in 0..1000 {
            m.push(0.1f64);
        }
        assert_eq!(m.mean, 0.1);
        m.push(f64::INFINITY);
        m.push(1.0);
        assert_eq!(m.mean, f64::INFINITY);
    }

    #[test]
    fn quadratic_and_abs() {
        let r = nelder_mead(|a: &[f64]| (a[0] - 1.0).powi(2), &[vec![0.1], vec![0.2]], &NmOptions::default()).unwrap();
        assert_eq!(r.termination, TerminationReason::Tolerance);
        assert!((r.estimate[0] - 1.0).abs() < 1e-4);
        let r = nelder_mead(|a: &[f64]| a[0].abs(), &[vec![-1.0], vec![2.0]], &NmOptions::default()).unwrap();
        assert!(r.estimate[0].abs() < 1e-4);
    }

    #[test]
    fn rosenbrock_in_two_dimensions() {
        let f = |p: &[f64]| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2);
        let opts = NmOptions { tol_x: 1e-8, tol_f: 1e-12, max_iter: 5000 };
        let r = nelder_mead(f, &[vec![-1.2, 1.0], vec![-1.0, 1.0], vec![-1.2, 1.2]], &opts).unwrap();
        assert!((r.estimate[0] - 1.0).abs() < 1e-3 && (r.estimate[1] - 1.0).abs() < 1e-3, "{:?}", r.estimate);
    }

    #[test]
    fn preconverged_simplex_returns_at_once() {
        let r = nelder_mead(|a: &[f64]| a[0] * a[0], &[vec![0.0], vec![1e-5]], &NmOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.estimate, vec![0.0]);
        assert_eq!(r.evaluations, 2);
    }

    #[test]
    fn degenerate_simplex_is_config_error() {
        let f = |a: &[f64]| a[0];
        assert!(matches!(nelder_mead(f, &[vec![1.0], vec![1.0]], &NmOptions::default()), Err(Error::Config(_))));
        assert!(matches!(nelder_mead(f, &[vec![1.0]], &NmOptions::default()), Err(Error::Config(_))));
        let g = |a: &[f64]| a[0] + a[1];
        let flat = [vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(nelder_mead(g, &flat, &NmOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn best_value_never_increases() {
        let f = |a: &[f64]| (a[0] - 3.0).powi(2) + (5.0 * a[0]).sin();
        let r = nelder_mead(f, &[vec![-2.0], vec![-1.5]], &NmOptions::default()).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn divergent_points_are_avoided() {
        let f = |a: &[f64]| if a[0] <= 0.0 { f64::INFINITY } else { (a[0] - 0.3).powi(2) };
        let r = nelder_mead(f, &[vec![1.5], vec![2.0]], &NmOptions::default()).unwrap();
        assert!((r.estimate[0] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn noiseless_snm_matches_nm() {
        let f = |a: &[f64]| (a[0] - 1.0).powi(2);
        let nm = nelder_mead(f, &[vec![0.1], vec![0.2]], &NmOptions::default()).unwrap();
        let snm = stochastic_nelder_mead(|a: &[f64], _| f(a), &[vec![0.1], vec![0.2]], &SnmOptions::default()).unwrap();
        assert_eq!(nm.trace, snm.trace);
        assert_eq!(nm.estimate, snm.estimate);
        assert_eq!(nm.termination, snm.termination);
    }

    #[test]
    fn stall_without_box_is_config_error() {
        // constant objective: every reflection fails and the simplex shrinks
        let opts = SnmOptions { tol_x: 0.0, stall_tol: -1.0, ..SnmOptions::default() };
        let err = stochastic_nelder_mead(|_: &[f64], _| 1.0, &[vec![0.0], vec![1.0]], &opts).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let boxed = SnmOptions { bounds: Some(vec![(0.0, 1.0)]), max_restarts: 2, ..opts };
        let r = stochastic_nelder_mead(|_: &[f64], _| 1.0, &[vec![0.0], vec![1.0]], &boxed).unwrap();
        assert_eq!(r.termination, TerminationReason::Stall);
        assert_eq!(r.restarts, 2);
    }

    #[test]
    fn trace_csv_header() {
        let r = nelder_mead(|a: &[f64]| a[0] * a[0], &[vec![0.5], vec![1.0]], &NmOptions::default()).unwrap();
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,best_a,best_objective\n1,"));
        assert_eq!(text.lines().count(), r.trace.len() + 1);
    }
}
