//! Seeded Wiener paths, the sample-rescaling map, stationary
//! Ornstein–Uhlenbeck paths and truncated stationary stochastic integrals.
//!
//! Gaussian draws come from a ChaCha8 stream turned into normals by the
//! Box–Muller transform, two normals per pair of 64-bit words. Because the
//! consumption per draw is fixed, the draw for any global step index can be
//! reached by seeking the stream; regeneration never depends on how long a
//! window was requested. Steps at or after `t = 0` read stream 0, steps before
//! `t = 0` read stream 1 walking backwards from zero, and stationary initial
//! states read stream 2.

use rand_distr::{Distribution, StandardNormal};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::real::Real;

const STREAM_FORWARD: u64 = 0;
const STREAM_BACKWARD: u64 = 1;
const STREAM_INITIAL: u64 = 2;

/// Default tail tolerance for truncated integrals over `(-inf, 0]`.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-8;

/// Uniform time discretisation `t_k = t_start + k dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    pub t_start: T,
    pub dt: T,
    pub n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t_start: T, dt: T, n_steps: usize) -> Result<Self> {
        let g = Self { t_start, dt, n_steps };
        g.validate()?;
        Ok(g)
    }

    /// Grid from `t_start` to `t_end` whose step divides the span exactly (to
    /// within round-off); errors otherwise.
    pub fn spanning(t_start: T, t_end: T, dt: T) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let steps = (t_end - t_start) / dt;
        let n = steps.round();
        if n < T::zero() || (steps - n).abs() > T::lit(1e-6) * n.max(T::one()) {
            return Err(Error::Config(format!(
                "span [{t_start}, {t_end}] is not a whole number of steps of {dt}"
            )));
        }
        Self::new(t_start, dt, n.to_usize().unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {}", self.dt)));
        }
        if !self.t_start.is_finite() {
            return Err(Error::Config("grid start must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn node(&self, k: usize) -> T {
        self.t_start + T::from_usize_lossy(k) * self.dt
    }

    pub fn t_end(&self) -> T {
        self.node(self.n_steps)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn nodes(&self) -> impl Iterator<Item = T> + '_ {
        (0..=self.n_steps).map(move |k| self.node(k))
    }

    /// Index of the node at time `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: T) -> Option<usize> {
        let x = (t - self.t_start) / self.dt;
        let k = x.round();
        if k < T::zero() || (x - k).abs() > T::lit(1e-6) {
            return None;
        }
        let k = k.to_usize()?;
        (k <= self.n_steps).then_some(k)
    }

    /// Global step index of the first step, i.e. `t_start / dt`, which must be
    /// an integer so that steps line up with the two-sided stream layout.
    fn global_offset(&self) -> Result<i64> {
        let x = self.t_start / self.dt;
        let k = x.round();
        if (x - k).abs() > T::lit(1e-6) * k.abs().max(T::one()) {
            return Err(Error::Config(format!(
                "grid start {} is not a multiple of dt = {}",
                self.t_start, self.dt
            )));
        }
        k.to_i64()
            .ok_or_else(|| Error::Config("grid offset out of range".into()))
    }

    pub fn same_as(&self, other: &Self) -> bool {
        self.n_steps == other.n_steps
            && (self.dt - other.dt).abs() <= T::epsilon() * T::lit(8.0) * self.dt
            && (self.t_start - other.t_start).abs()
                <= T::epsilon() * T::lit(8.0) * (self.dt + self.t_start.abs())
    }
}

/// Wiener increments `ΔW_k` (each `N(0, dt I_m)`) on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath<T> {
    pub grid: TimeGrid<T>,
    pub dim: usize,
    pub seed: u64,
    /// Row-major `n_steps x dim`.
    increments: Vec<T>,
}

impl<T: Real> NoisePath<T> {
    /// Builds a path from explicit increments (row-major `n_steps x dim`).
    pub fn from_increments(grid: TimeGrid<T>, dim: usize, seed: u64, increments: Vec<T>) -> Result<Self> {
        grid.validate()?;
        if increments.len() != grid.n_steps * dim {
            return Err(Error::Config(format!(
                "expected {} increments, got {}",
                grid.n_steps * dim,
                increments.len()
            )));
        }
        Ok(Self { grid, dim, seed, increments })
    }

    #[inline]
    pub fn increment(&self, k: usize) -> &[T] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn increments(&self) -> &[T] {
        &self.increments
    }

    pub fn len(&self) -> usize {
        self.grid.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.grid.n_steps == 0
    }

    /// Sub-path on `[t0, t1]`; both ends must be nodes of this path.
    pub fn window(&self, t0: T, t1: T) -> Result<Self> {
        let (i0, i1) = match (self.grid.index_of(t0), self.grid.index_of(t1)) {
            (Some(a), Some(b)) if a <= b => (a, b),
            _ => {
                return Err(Error::Domain(format!(
                    "window [{t0}, {t1}] outside path support [{}, {}]",
                    self.grid.t_start,
                    self.grid.t_end()
                )))
            }
        };
        let grid = TimeGrid {
            t_start: self.grid.node(i0),
            dt: self.grid.dt,
            n_steps: i1 - i0,
        };
        Ok(Self {
            grid,
            dim: self.dim,
            seed: self.seed,
            increments: self.increments[i0 * self.dim..i1 * self.dim].to_vec(),
        })
    }

    /// Merges `stride` consecutive steps into one (Brownian increments add).
    pub fn coarsen(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.grid.n_steps % stride != 0 {
            return Err(Error::Config(format!(
                "cannot coarsen {} steps by {stride}",
                self.grid.n_steps
            )));
        }
        let n = self.grid.n_steps / stride;
        let mut inc = vec![T::zero(); n * self.dim];
        for k in 0..n {
            for j in 0..stride {
                let src = self.increment(k * stride + j);
                for (d, s) in inc[k * self.dim..(k + 1) * self.dim].iter_mut().zip(src) {
                    *d = *d + *s;
                }
            }
        }
        Ok(Self {
            grid: TimeGrid {
                t_start: self.grid.t_start,
                dt: self.grid.dt * T::from_usize_lossy(stride),
                n_steps: n,
            },
            dim: self.dim,
            seed: self.seed,
            increments: inc,
        })
    }
}

/// Which stationary process a [`StationaryPath`] realises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessTag {
    /// `η^ε(θ_t ω)` on physical time.
    EtaEps,
    /// `η(θ_τ ψ_ε ω)` on fast time.
    EtaRescaled,
}

/// One value per grid node of a stationary process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPath<T> {
    pub grid: TimeGrid<T>,
    pub dim: usize,
    pub tag: ProcessTag,
    values: Vec<T>,
}

impl<T: Real> StationaryPath<T> {
    pub fn from_values(grid: TimeGrid<T>, dim: usize, tag: ProcessTag, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.n_nodes() * dim {
            return Err(Error::Config("stationary path length does not match grid".into()));
        }
        Ok(Self { grid, dim, tag, values })
    }

    #[inline]
    pub fn value(&self, k: usize) -> &[T] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// splitmix64 finaliser.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a master seed and a tag path,
/// e.g. `(master, [vertex, iteration, sample])`.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(master), |acc, &t| mix64(acc ^ mix64(t)))
}

/// Normals per seekable block of a stream.
const BLOCK: u64 = 1024;
/// 32-bit words reserved per block; the ziggurat needs about two per normal.
const BLOCK_WORDS: u128 = 1 << 24;

/// Counter-addressable standard normal stream: normal number `i` is the
/// `i mod BLOCK`-th ziggurat draw after seeking to block `i / BLOCK`.
struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Fills `out` with normals number `start, start+1, ...` of this stream.
    fn fill(&mut self, start: u64, out: &mut [f64]) {
        let mut idx = start;
        let mut done = 0;
        while done < out.len() {
            let within = idx % BLOCK;
            self.rng.set_word_pos(u128::from(idx / BLOCK) * BLOCK_WORDS);
            for _ in 0..within {
                let _: f64 = StandardNormal.sample(&mut self.rng);
            }
            let take = ((BLOCK - within) as usize).min(out.len() - done);
            for z in &mut out[done..done + take] {
                *z = StandardNormal.sample(&mut self.rng);
            }
            done += take;
            idx += take as u64;
        }
    }
}

/// Reproducible Wiener increments on `grid` in dimension `dim`.
///
/// The grid start must be a multiple of `dt` so every step has a well-defined
/// global index; the portion before `t = 0` is read from an independent
/// backward stream, which makes a two-sided path over `[-T, T]` consistent
/// with any one-sided window of it.
pub fn sample_wiener<T: Real>(grid: TimeGrid<T>, dim: usize, seed: u64) -> Result<NoisePath<T>> {
    grid.validate()?;
    if dim == 0 {
        return Err(Error::Config("noise dimension must be positive".into()));
    }
    let offset = grid.global_offset()?;
    let n = grid.n_steps;
    let sqrt_dt = grid.dt.as_f64().sqrt();
    let mut raw = vec![0.0f64; n * dim];

    // backward part: global steps offset..min(0, offset+n), stored reversed
    let neg_count = if offset < 0 { (-offset).min(n as i64) as usize } else { 0 };
    if neg_count > 0 {
        // global step g < 0 maps to backward index (-g - 1)
        let first_back = (-offset - neg_count as i64) as u64;
        let mut buf = vec![0.0f64; neg_count * dim];
        GaussianStream::new(seed, STREAM_BACKWARD).fill(first_back * dim as u64, &mut buf);
        // buf[r] holds backward index first_back + r, i.e. global step
        // -(first_back + r) - 1, which is local step neg_count - 1 - r
        for r in 0..neg_count {
            let local = neg_count - 1 - r;
            raw[local * dim..(local + 1) * dim].copy_from_slice(&buf[r * dim..(r + 1) * dim]);
        }
    }
    if n > neg_count {
        let first_fwd = (offset + neg_count as i64) as u64;
        GaussianStream::new(seed, STREAM_FORWARD)
            .fill(first_fwd * dim as u64, &mut raw[neg_count * dim..]);
    }
    let increments = raw.into_iter().map(|z| T::lit(z * sqrt_dt)).collect();
    Ok(NoisePath { grid, dim, seed, increments })
}

/// Standard normals for the stationary initial state at global node `index`.
fn initial_normals(seed: u64, index: i64, dim: usize) -> Vec<f64> {
    // zigzag so negative node indices get their own slots
    let z = ((index << 1) ^ (index >> 63)) as u64;
    let mut out = vec![0.0; dim];
    GaussianStream::new(seed, STREAM_INITIAL).fill(z * dim as u64, &mut out);
    out
}

/// Realises `W_τ(ψ_ε ω) = W_{τε}(ω)/√ε` on fast time `τ = t/ε`.
///
/// Every `stride` source steps are merged into one output step, so the output
/// step is `stride·dt/ε`. `stride = 1` is the plain change of variables.
pub fn rescale_noise<T: Real>(path: &NoisePath<T>, eps: T, stride: usize) -> Result<NoisePath<T>> {
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let merged = if stride == 1 { path.clone() } else { path.coarsen(stride)? };
    let inv_sqrt = T::one() / eps.sqrt();
    Ok(NoisePath {
        grid: TimeGrid {
            t_start: merged.grid.t_start / eps,
            dt: merged.grid.dt / eps,
            n_steps: merged.grid.n_steps,
        },
        dim: merged.dim,
        seed: merged.seed,
        increments: merged.increments.iter().map(|&w| w * inv_sqrt).collect(),
    })
}

/// Rescales the part of `path` lying over fast-time window `[tau0, tau1]`.
pub fn rescale_window<T: Real>(path: &NoisePath<T>, eps: T, tau0: T, tau1: T) -> Result<NoisePath<T>> {
    let sub = path.window(tau0 * eps, tau1 * eps)?;
    rescale_noise(&sub, eps, 1)
}

/// Exact one-step coefficients of the linear SDE `dη = (B/ε) η dt + ε^{-1/2} dW`
/// over a step `dt`: transition matrix and Cholesky factor of the step
/// covariance, plus the Cholesky factor of the stationary covariance.
#[derive(Debug, Clone)]
pub struct OuStep<T> {
    pub transition: Mat<T>,
    pub step_chol: Mat<T>,
    pub stationary_chol: Mat<T>,
}

impl<T: Real> OuStep<T> {
    pub fn new(b: &Mat<T>, eps: T, dt: T) -> Result<Self> {
        check_h1(b)?;
        let m = b.rows();
        let h = dt / eps;
        if m == 1 {
            let beta = b[(0, 0)];
            let var_h = (beta * (h + h)).exp_m1() / (beta + beta);
            let var_inf = -T::one() / (beta + beta);
            return Ok(Self {
                transition: Mat::scalar((beta * h).exp()),
                step_chol: Mat::scalar(var_h.sqrt()),
                stationary_chol: Mat::scalar(var_inf.sqrt()),
            });
        }
        // Van Loan: exp([[-B, I], [0, Bᵀ]] h) = [[., G], [0, F]], Σ_h = Fᵀ G.
        let mut c = Mat::zeros(2 * m, 2 * m);
        let bt = b.transpose();
        for i in 0..m {
            for j in 0..m {
                c[(i, j)] = -b[(i, j)] * h;
                c[(m + i, m + j)] = bt[(i, j)] * h;
            }
            c[(i, m + i)] = h;
        }
        let e = c.expm();
        let mut g = Mat::zeros(m, m);
        let mut f = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                g[(i, j)] = e[(i, m + j)];
                f[(i, j)] = e[(m + i, m + j)];
            }
        }
        let sigma_h = f.transpose().matmul(&g);
        let sigma_h = sigma_h.add(&sigma_h.transpose()).scale(T::lit(0.5));
        let sigma_inf = b.lyapunov(&Mat::identity(m))?;
        Ok(Self {
            transition: b.scale(h).expm(),
            step_chol: sigma_h.cholesky_semi(),
            stationary_chol: sigma_inf
                .cholesky()
                .ok_or_else(|| Error::Hypothesis {
                    hypothesis: "H1",
                    detail: "stationary covariance is not positive definite".into(),
                })?,
        })
    }
}

/// Checks the spectral part of H1 on the fast matrix: every eigenvalue of
/// `B` has negative real part.
pub fn check_h1<T: Real>(b: &Mat<T>) -> Result<()> {
    if !b.is_square() {
        return Err(Error::Config("fast matrix must be square".into()));
    }
    if !b.is_hurwitz() {
        return Err(Error::Hypothesis {
            hypothesis: "H1",
            detail: format!(
                "fast matrix has spectral abscissa {} >= 0; exponential decay estimate fails",
                b.spectral_abscissa()
            ),
        });
    }
    Ok(())
}

/// Stationary solution of `dη = (B/ε) η dt + ε^{-1/2} dW` on the nodes of
/// `path`, using the exact Gaussian recursion `η_{k+1} = e^{B dt/ε} η_k + ζ_k`.
///
/// `ζ_k` is the path increment rescaled by the Cholesky factor of the exact
/// step covariance, so the output is a deterministic function of the path.
/// The initial node is drawn from the stationary law using the path seed.
pub fn ou_stationary_path<T: Real>(b: &Mat<T>, eps: T, path: &NoisePath<T>) -> Result<StationaryPath<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let m = b.rows();
    if path.dim != m {
        return Err(Error::Config(format!(
            "noise dimension {} does not match fast dimension {m}",
            path.dim
        )));
    }
    let step = OuStep::new(b, eps, path.grid.dt)?;
    // For a unit-rate rescaled path the noise step is ΔW/√dt regardless of ε.
    let offset = path.grid.global_offset().unwrap_or(0);
    let z0: Vec<T> = initial_normals(path.seed, offset, m).into_iter().map(T::lit).collect();
    let eta0 = step.stationary_chol.mul_vec(&z0);
    let inv_sqrt_dt = T::one() / path.grid.dt.sqrt();

    let n = path.grid.n_steps;
    let mut values = Vec::with_capacity((n + 1) * m);
    values.extend_from_slice(&eta0);
    let mut cur = eta0;
    let mut next = vec![T::zero(); m];
    let mut z = vec![T::zero(); m];
    let mut zeta = vec![T::zero(); m];
    for k in 0..n {
        for (zi, &w) in z.iter_mut().zip(path.increment(k)) {
            *zi = w * inv_sqrt_dt;
        }
        step.transition.mul_vec_into(&cur, &mut next);
        step.step_chol.mul_vec_into(&z, &mut zeta);
        for (nx, &zt) in next.iter_mut().zip(&zeta) {
            *nx = *nx + zt;
        }
        values.extend_from_slice(&next);
        std::mem::swap(&mut cur, &mut next);
    }
    let tag = if eps == T::one() {
        ProcessTag::EtaRescaled
    } else {
        ProcessTag::EtaEps
    };
    StationaryPath::from_values(path.grid, m, tag, values)
}

/// Truncation length `ln(1/tol)/β` for kernels decaying like `e^{βs}`.
pub fn default_truncation<T: Real>(beta_min: T, tol: T) -> T {
    (T::one() / tol).ln() / beta_min
}

/// Truncated Itô integral `∫_{-T}^0 k(s) dW_s ≈ Σ k(s_k) ΔW_k` (left-point
/// kernel evaluation) over a scalar path that covers `[-T, 0]`.
pub fn stationary_integral<T: Real, K>(kernel: K, path: &NoisePath<T>, truncation: T) -> Result<T>
where
    K: Fn(T) -> T,
{
    if path.dim != 1 {
        return Err(Error::Config("stationary integral expects a scalar path".into()));
    }
    if !(truncation > T::zero()) {
        return Err(Error::Config("truncation length must be positive".into()));
    }
    let g = &path.grid;
    let slack = g.dt * T::lit(1e-6);
    if g.t_start > -truncation + slack || g.t_end() < -slack {
        return Err(Error::Domain(format!(
            "path support [{}, {}] does not cover [-{truncation}, 0]",
            g.t_start,
            g.t_end()
        )));
    }
    let mut acc = T::zero();
    for k in 0..g.n_steps {
        let s = g.node(k);
        if s < -truncation - slack {
            continue;
        }
        if s >= -slack {
            break;
        }
        acc = acc + kernel(s) * path.increment(k)[0];
    }
    Ok(acc)
}
