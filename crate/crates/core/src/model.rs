//! Slow-fast systems `ẋ = Ax + f(x, y)`, `ẏ = (By + g(x, y))/ε + σ ε^{-1/2} Ẇ`,
//! their Euler–Maruyama integration, the random change of variables
//! `(X, Y) = (x, y - σ η^ε(θ_t ω))`, and the mean-square absorbing-set check for
//! the worked example.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_float;
use crate::linalg::Mat;
use crate::noise::{NoisePath, StationaryPath, TimeGrid};
use crate::real::{norm, Real};

/// State norm beyond which a simulation is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Largest admissible `dt / ε` for the explicit fast step.
pub const STIFFNESS_RATIO: f64 = 1.0 / 50.0;

/// Named real parameters passed to the nonlinearities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Params<T> {
    entries: Vec<(String, T)>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn with(mut self, name: &str, value: T) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: T) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = value,
            None => self.entries.push((name.to_owned(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<T> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Nonlinear drifts `f`, `g` of a slow-fast system and the partial
/// derivatives of `g`.
pub trait Nonlinearity<T: Real>: Send + Sync {
    /// Slow nonlinearity, written into `out` (length n).
    fn f(&self, x: &[T], y: &[T], p: &Params<T>, out: &mut [T]);
    /// Fast nonlinearity, written into `out` (length m).
    fn g(&self, x: &[T], y: &[T], p: &Params<T>, out: &mut [T]);
    /// `∂g/∂x`, an m×n matrix.
    fn g_x(&self, x: &[T], y: &[T], p: &Params<T>) -> Mat<T>;
    /// `∂g/∂y`, an m×m matrix.
    fn g_y(&self, x: &[T], y: &[T], p: &Params<T>) -> Mat<T>;
}

type VecFn<T> = dyn Fn(&[T], &[T], &Params<T>) -> Vec<T> + Send + Sync;
type MatFn<T> = dyn Fn(&[T], &[T], &Params<T>) -> Mat<T> + Send + Sync;

/// A [`Nonlinearity`] assembled from closures.
#[derive(Clone)]
pub struct FnNonlinearity<T> {
    pub f: Arc<VecFn<T>>,
    pub g: Arc<VecFn<T>>,
    pub g_x: Arc<MatFn<T>>,
    pub g_y: Arc<MatFn<T>>,
}

impl<T> fmt::Debug for FnNonlinearity<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnNonlinearity")
    }
}

impl<T: Real> Nonlinearity<T> for FnNonlinearity<T> {
    fn f(&self, x: &[T], y: &[T], p: &Params<T>, out: &mut [T]) {
        out.copy_from_slice(&(self.f)(x, y, p));
    }

    fn g(&self, x: &[T], y: &[T], p: &Params<T>, out: &mut [T]) {
        out.copy_from_slice(&(self.g)(x, y, p));
    }

    fn g_x(&self, x: &[T], y: &[T], p: &Params<T>) -> Mat<T> {
        (self.g_x)(x, y, p)
    }

    fn g_y(&self, x: &[T], y: &[T], p: &Params<T>) -> Mat<T> {
        (self.g_y)(x, y, p)
    }
}

/// Lipschitz constants of `f` and `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBounds<T> {
    pub l_f: T,
    pub l_g: T,
}

/// Constants of the exponential dichotomy: `|e^{At}x| <= K e^{αt}|x|` for
/// `t <= 0` and `|e^{Bt}y| <= K e^{-βt}|y|` for `t >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBounds<T> {
    pub alpha: T,
    pub beta: T,
    pub k: T,
}

/// Full description of a slow-fast system with additive fast noise.
#[derive(Clone)]
pub struct SlowFastModel<T: Real> {
    pub a_mat: Mat<T>,
    pub b_mat: Mat<T>,
    pub nonlinearity: Arc<dyn Nonlinearity<T>>,
    pub eps: T,
    pub sigma: T,
    pub params: Params<T>,
    pub lipschitz: Option<LipschitzBounds<T>>,
    pub spectral: Option<SpectralBounds<T>>,
    /// Non-fatal hypothesis failures recorded during construction.
    pub warnings: Vec<String>,
}

impl<T: Real> fmt::Debug for SlowFastModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SlowFastModel")
            .field("n", &self.n())
            .field("m", &self.m())
            .field("eps", &self.eps)
            .field("sigma", &self.sigma)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl<T: Real> SlowFastModel<T> {
    pub fn new(
        a_mat: Mat<T>,
        b_mat: Mat<T>,
        nonlinearity: Arc<dyn Nonlinearity<T>>,
        eps: T,
        sigma: T,
        params: Params<T>,
    ) -> Result<Self> {
        if !a_mat.is_square() || !b_mat.is_square() {
            return Err(Error::Config("A and B must be square".into()));
        }
        if a_mat.rows() == 0 || b_mat.rows() == 0 {
            return Err(Error::Config("slow and fast dimensions must be positive".into()));
        }
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
        }
        if !(sigma >= T::zero()) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(Self {
            a_mat,
            b_mat,
            nonlinearity,
            eps,
            sigma,
            params,
            lipschitz: None,
            spectral: None,
            warnings: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.a_mat.rows()
    }

    pub fn m(&self) -> usize {
        self.b_mat.rows()
    }

    /// Attaches Lipschitz constants and re-runs the H2 check.
    pub fn with_lipschitz(mut self, l_f: T, l_g: T) -> Self {
        self.lipschitz = Some(LipschitzBounds { l_f, l_g });
        self.refresh_h2();
        self
    }

    /// Attaches user-supplied dichotomy constants and re-runs the H2 check.
    pub fn with_spectral_bounds(mut self, bounds: SpectralBounds<T>) -> Self {
        self.spectral = Some(bounds);
        self.refresh_h2();
        self
    }

    pub fn with_param(mut self, name: &str, value: T) -> Self {
        self.params.set(name, value);
        self
    }

    fn refresh_h2(&mut self) {
        self.warnings.retain(|w| !w.starts_with("H2"));
        if let Some(w) = self.check_h2() {
            self.warnings.push(w);
        }
    }

    /// Dichotomy constants: the supplied ones, or estimates from the spectra
    /// of `A` and `B`.
    pub fn spectral_constants(&self) -> Result<SpectralBounds<T>> {
        if let Some(s) = self.spectral {
            return Ok(s);
        }
        crate::noise::check_h1(&self.b_mat)?;
        let beta = -self.b_mat.spectral_abscissa();
        let k_b = decay_constant(&self.b_mat, beta);
        let alpha = self.a_mat.scale(-T::one()).spectral_abscissa().max(T::zero());
        let k_a = decay_constant(&self.a_mat.scale(-T::one()), alpha);
        Ok(SpectralBounds { alpha, beta: beta.min(k_b.1), k: k_a.0.max(k_b.0) })
    }

    /// H2: `β > K L_g`. Returns a warning message when it fails (or cannot be
    /// evaluated); `None` when it holds or no Lipschitz bound is known.
    pub fn check_h2(&self) -> Option<String> {
        let lip = self.lipschitz?;
        match self.spectral_constants() {
            Ok(s) if s.beta > s.k * lip.l_g => None,
            Ok(s) => Some(format!(
                "H2 fails: beta = {} <= K L_g = {} (nonlinearity may be only locally Lipschitz)",
                s.beta,
                s.k * lip.l_g
            )),
            Err(e) => Some(format!("H2 not evaluated: {e}")),
        }
    }

    /// Compares `g_x`, `g_y` with central differences of `g` at `points`
    /// random states drawn from `[-scale, scale]`. Returns the worst relative
    /// error seen.
    pub fn derivative_mismatch(&self, points: usize, scale: T, seed: u64) -> T {
        let (n, m) = (self.n(), self.m());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h_rel = T::epsilon().cbrt();
        let mut worst = T::zero();
        let mut gp = vec![T::zero(); m];
        let mut gm = vec![T::zero(); m];
        for _ in 0..points {
            let x: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0)) * scale).collect();
            let y: Vec<T> = (0..m).map(|_| T::lit(rng.gen_range(-1.0..1.0)) * scale).collect();
            let jx = self.nonlinearity.g_x(&x, &y, &self.params);
            let jy = self.nonlinearity.g_y(&x, &y, &self.params);
            let fd = |v: &[T], j: usize, use_x: bool, gp: &mut [T], gm: &mut [T]| {
                let h = h_rel * v[j].abs().max(T::one());
                let mut vp = v.to_vec();
                let mut vm = v.to_vec();
                vp[j] = vp[j] + h;
                vm[j] = vm[j] - h;
                if use_x {
                    self.nonlinearity.g(&vp, &y, &self.params, gp);
                    self.nonlinearity.g(&vm, &y, &self.params, gm);
                } else {
                    self.nonlinearity.g(&x, &vp, &self.params, gp);
                    self.nonlinearity.g(&x, &vm, &self.params, gm);
                }
                (vp[j] - vm[j], ())
            };
            for j in 0..n {
                let (span, _) = fd(&x, j, true, &mut gp, &mut gm);
                for i in 0..m {
                    let approx = (gp[i] - gm[i]) / span;
                    let exact = jx[(i, j)];
                    worst = worst.max((approx - exact).abs() / exact.abs().max(T::one()));
                }
            }
            for j in 0..m {
                let (span, _) = fd(&y, j, false, &mut gp, &mut gm);
                for i in 0..m {
                    let approx = (gp[i] - gm[i]) / span;
                    let exact = jy[(i, j)];
                    worst = worst.max((approx - exact).abs() / exact.abs().max(T::one()));
                }
            }
        }
        worst
    }

    /// Slow drift `Ax + f(x, y)`.
    pub fn slow_drift(&self, x: &[T], y: &[T], out: &mut [T]) {
        let mut fx = vec![T::zero(); self.n()];
        self.a_mat.mul_vec_into(x, out);
        self.nonlinearity.f(x, y, &self.params, &mut fx);
        for (o, v) in out.iter_mut().zip(fx) {
            *o = *o + v;
        }
    }
}

/// `(K, β_used)` with `|e^{Mt}| <= K e^{-βt}` over a sampled horizon. Falls
/// back to a slightly smaller rate when the bound keeps growing (defective
/// spectrum).
fn decay_constant<T: Real>(m: &Mat<T>, rate: T) -> (T, T) {
    let horizon = T::lit(40.0) / rate.max(T::lit(1e-3));
    let eval = |beta: T| {
        let mut k = T::one();
        let mut last = T::one();
        let samples = 400;
        for i in 1..=samples {
            let t = horizon * T::from_usize_lossy(i) / T::from_usize_lossy(samples);
            last = m.scale(t).expm().norm_2() * (beta * t).exp();
            k = k.max(last);
        }
        (k, last)
    };
    let (k, last) = eval(rate);
    if last < k * T::lit(0.999) || last <= T::one() {
        (k, rate)
    } else {
        let r = rate * T::lit(0.99);
        (eval(r).0, r)
    }
}

/// Sampled solution of a slow-fast system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub grid: TimeGrid<T>,
    pub n: usize,
    pub m: usize,
    /// Row-major `(n_steps + 1) x n`.
    pub slow: Vec<T>,
    /// Row-major `(n_steps + 1) x m`.
    pub fast: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    #[inline]
    pub fn slow_at(&self, k: usize) -> &[T] {
        &self.slow[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn fast_at(&self, k: usize) -> &[T] {
        &self.fast[k * self.m..(k + 1) * self.m]
    }

    pub fn len(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// CSV with header `t,x_1..x_n,y_1..y_m`, one row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x_{i}")));
        header.extend((1..=self.m).map(|i| format!("y_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt_float(self.grid.node(k))];
            row.extend(self.slow_at(k).iter().map(|&v| fmt_float(v)));
            row.extend(self.fast_at(k).iter().map(|&v| fmt_float(v)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_stiffness<T: Real>(dt: T, eps: T) -> Result<()> {
    let limit = eps * T::lit(STIFFNESS_RATIO);
    if dt > limit * (T::one() + T::lit(1e-9)) {
        return Err(Error::Stiffness {
            dt: dt.as_f64(),
            suggested: limit.as_f64(),
        });
    }
    Ok(())
}

fn check_path<T: Real>(grid: &TimeGrid<T>, path: &NoisePath<T>, m: usize) -> Result<()> {
    if path.dim != m {
        return Err(Error::Config(format!(
            "noise dimension {} does not match fast dimension {m}",
            path.dim
        )));
    }
    if !grid.same_as(&path.grid) {
        return Err(Error::Domain("noise path grid does not match simulation grid".into()));
    }
    Ok(())
}

fn diverged<T: Real>(step: usize, t: T, state: T) -> Error {
    Error::Divergence {
        step,
        t: t.as_f64(),
        detail: format!("state norm {state} is non-finite or exceeds {DIVERGENCE_THRESHOLD:e}"),
    }
}

/// Euler–Maruyama integration of the full system on `grid`:
/// `x += dt (Ax + f)`, `y += (dt/ε)(By + g) + σ/√ε ΔW`.
pub fn simulate_full<T: Real>(
    model: &SlowFastModel<T>,
    x0: &[T],
    y0: &[T],
    grid: &TimeGrid<T>,
    path: &NoisePath<T>,
) -> Result<Trajectory<T>> {
    let (n, m) = (model.n(), model.m());
    if x0.len() != n || y0.len() != m {
        return Err(Error::Config("initial condition has wrong dimension".into()));
    }
    grid.validate()?;
    check_stiffness(grid.dt, model.eps)?;
    check_path(grid, path, m)?;

    let steps = grid.n_steps;
    let dt = grid.dt;
    let rate = dt / model.eps;
    let noise_scale = model.sigma / model.eps.sqrt();
    let threshold = T::lit(DIVERGENCE_THRESHOLD);

    let mut slow = Vec::with_capacity((steps + 1) * n);
    let mut fast = Vec::with_capacity((steps + 1) * m);
    slow.extend_from_slice(x0);
    fast.extend_from_slice(y0);
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let (mut ax, mut fx) = (vec![T::zero(); n], vec![T::zero(); n]);
    let (mut by, mut gy) = (vec![T::zero(); m], vec![T::zero(); m]);
    for k in 0..steps {
        model.a_mat.mul_vec_into(&x, &mut ax);
        model.nonlinearity.f(&x, &y, &model.params, &mut fx);
        model.b_mat.mul_vec_into(&y, &mut by);
        model.nonlinearity.g(&x, &y, &model.params, &mut gy);
        let dw = path.increment(k);
        for i in 0..n {
            x[i] = x[i] + dt * (ax[i] + fx[i]);
        }
        for i in 0..m {
            y[i] = y[i] + rate * (by[i] + gy[i]) + noise_scale * dw[i];
        }
        let size = norm(&x) + norm(&y);
        if !size.is_finite() || size > threshold {
            return Err(diverged(k + 1, grid.node(k + 1), size));
        }
        slow.extend_from_slice(&x);
        fast.extend_from_slice(&y);
    }
    Ok(Trajectory { grid: *grid, n, m, slow, fast })
}

/// `(x, y) -> (x, y - σ η)` nodewise.
pub fn transform_random<T: Real>(traj: &Trajectory<T>, eta: &StationaryPath<T>, sigma: T) -> Result<Trajectory<T>> {
    shift_fast(traj, eta, -sigma)
}

/// Inverse of [`transform_random`]: `(X, Y) -> (X, Y + σ η)`.
pub fn inverse_transform_random<T: Real>(
    traj: &Trajectory<T>,
    eta: &StationaryPath<T>,
    sigma: T,
) -> Result<Trajectory<T>> {
    shift_fast(traj, eta, sigma)
}

fn shift_fast<T: Real>(traj: &Trajectory<T>, eta: &StationaryPath<T>, coef: T) -> Result<Trajectory<T>> {
    if !traj.grid.same_as(&eta.grid) || eta.dim != traj.m {
        return Err(Error::Domain("trajectory and stationary path grids differ".into()));
    }
    let mut out = traj.clone();
    if coef == T::zero() {
        return Ok(out);
    }
    for (y, &e) in out.fast.iter_mut().zip(eta.values()) {
        *y = *y + coef * e;
    }
    Ok(out)
}

/// The worked example: `ẋ = 0.001x - a x y`, `ẏ = (-y + x²/600)/ε + σ ε^{-1/2} Ẇ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleModel<T> {
    pub a: T,
    pub eps: T,
    pub sigma: T,
}

/// Linear rate of the example's slow equation.
pub const EXAMPLE_SLOW_RATE: f64 = 0.001;
/// Denominator of the example's fast forcing `x²/600`.
pub const EXAMPLE_COUPLING_DENOM: f64 = 600.0;

/// `f = -a x y`, `g = x²/600` for the example.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExampleNonlinearity;

impl<T: Real> Nonlinearity<T> for ExampleNonlinearity {
    fn f(&self, x: &[T], y: &[T], p: &Params<T>, out: &mut [T]) {
        let a = p.get("a").unwrap_or_else(T::zero);
        out[0] = -a * x[0] * y[0];
    }

    fn g(&self, x: &[T], _y: &[T], _p: &Params<T>, out: &mut [T]) {
        out[0] = x[0] * x[0] / T::lit(EXAMPLE_COUPLING_DENOM);
    }

    fn g_x(&self, x: &[T], _y: &[T], _p: &Params<T>) -> Mat<T> {
        Mat::scalar(T::lit(2.0) * x[0] / T::lit(EXAMPLE_COUPLING_DENOM))
    }

    fn g_y(&self, _x: &[T], _y: &[T], _p: &Params<T>) -> Mat<T> {
        Mat::scalar(T::zero())
    }
}

impl<T: Real> ExampleModel<T> {
    pub fn new(a: T, eps: T, sigma: T) -> Result<Self> {
        if !(a > T::zero()) || !a.is_finite() {
            return Err(Error::Config(format!("example parameter a must be positive, got {a}")));
        }
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
        }
        if !(sigma >= T::zero()) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(Self { a, eps, sigma })
    }

    pub fn to_model(&self) -> SlowFastModel<T> {
        SlowFastModel::new(
            Mat::scalar(T::lit(EXAMPLE_SLOW_RATE)),
            Mat::scalar(-T::one()),
            Arc::new(ExampleNonlinearity),
            self.eps,
            self.sigma,
            Params::new().with("a", self.a),
        )
        .expect("example parameters validated on construction")
    }

    /// Scalar Euler–Maruyama; performs exactly the arithmetic of
    /// [`simulate_full`] on [`Self::to_model`] without the generic overhead.
    pub fn simulate(&self, x0: T, y0: T, grid: &TimeGrid<T>, path: &NoisePath<T>) -> Result<Trajectory<T>> {
        grid.validate()?;
        check_stiffness(grid.dt, self.eps)?;
        check_path(grid, path, 1)?;
        let steps = grid.n_steps;
        let dt = grid.dt;
        let rate = dt / self.eps;
        let noise_scale = self.sigma / self.eps.sqrt();
        let lin = T::lit(EXAMPLE_SLOW_RATE);
        let denom = T::lit(EXAMPLE_COUPLING_DENOM);
        let threshold = T::lit(DIVERGENCE_THRESHOLD);
        let a = self.a;
        let inc = path.increments();

        let mut slow = Vec::with_capacity(steps + 1);
        let mut fast = Vec::with_capacity(steps + 1);
        let (mut x, mut y) = (x0, y0);
        slow.push(x);
        fast.push(y);
        for k in 0..steps {
            let drift_x = lin * x + -a * x * y;
            let drift_y = -y + x * x / denom;
            x = x + dt * drift_x;
            y = y + rate * drift_y + noise_scale * inc[k];
            let size = x.abs() + y.abs();
            if !size.is_finite() || size > threshold {
                return Err(diverged(k + 1, grid.node(k + 1), size));
            }
            slow.push(x);
            fast.push(y);
        }
        Ok(Trajectory { grid: *grid, n: 1, m: 1, slow, fast })
    }

    /// Additive constant `2/(aε²) + 2aε²σ²` of the mean-square bound.
    pub fn absorbing_constant(&self) -> T {
        let (a, e, s) = (self.a, self.eps, self.sigma);
        T::lit(2.0) / (a * e * e) + T::lit(2.0) * a * e * e * s * s
    }

    /// Lyapunov-type functional `(ε/300) x² + 2aε² (y - 1/(aε²))²`.
    pub fn lyapunov_functional(&self, x: T, y: T) -> T {
        let (a, e) = (self.a, self.eps);
        let centre = T::one() / (a * e * e);
        e / T::lit(300.0) * x * x + T::lit(2.0) * a * e * e * (y - centre) * (y - centre)
    }
}

/// Outcome of checking the mean-square Gronwall bound on an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorbingReport {
    pub times: Vec<f64>,
    /// Ensemble mean of the functional at each node.
    pub mean_functional: Vec<f64>,
    /// `V(0) e^{-t/ε} + 2/(aε²) + 2aε²σ²` at each node.
    pub bound: Vec<f64>,
    pub bound_constant: f64,
    pub violations: usize,
    /// `max_t V(t)/bound(t)`; at most 1 when there are no violations.
    pub max_violation_ratio: f64,
    pub paths: usize,
}

/// Checks `E V(t) <= V(0) e^{-t/ε} + 2/(aε²) + 2aε²σ²` at every node of the
/// ensemble (all members on one grid, common initial condition).
pub fn absorbing_diagnostic<T: Real>(example: &ExampleModel<T>, ensemble: &[Trajectory<T>]) -> Result<AbsorbingReport> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::Domain("absorbing diagnostic needs a non-empty ensemble".into()))?;
    if ensemble.iter().any(|t| !t.grid.same_as(&first.grid) || t.n != 1 || t.m != 1) {
        return Err(Error::Domain("ensemble members must share one scalar grid".into()));
    }
    let nodes = first.len();
    let count = T::from_usize_lossy(ensemble.len());
    let constant = example.absorbing_constant();
    let mut mean = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let s: T = ensemble
            .iter()
            .map(|tr| example.lyapunov_functional(tr.slow[k], tr.fast[k]))
            .sum();
        mean.push(s / count);
    }
    let v0 = mean[0];
    let mut report = AbsorbingReport {
        times: Vec::with_capacity(nodes),
        mean_functional: Vec::with_capacity(nodes),
        bound: Vec::with_capacity(nodes),
        bound_constant: constant.as_f64(),
        violations: 0,
        max_violation_ratio: 0.0,
        paths: ensemble.len(),
    };
    for (k, &v) in mean.iter().enumerate() {
        let t = first.grid.node(k) - first.grid.t_start;
        let bound = v0 * (-t / example.eps).exp() + constant;
        if v > bound {
            report.violations += 1;
        }
        report.max_violation_ratio = report.max_violation_ratio.max((v / bound).as_f64());
        report.times.push(first.grid.node(k).as_f64());
        report.mean_functional.push(v.as_f64());
        report.bound.push(bound.as_f64());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_wiener;

    fn zero_nonlinearity() -> Arc<dyn Nonlinearity<f64>> {
        Arc::new(FnNonlinearity {
            f: Arc::new(|_, _, _| vec![0.0]),
            g: Arc::new(|_, _, _| vec![0.0]),
            g_x: Arc::new(|_, _, _| Mat::scalar(0.0)),
            g_y: Arc::new(|_, _, _| Mat::scalar(0.0)),
        })
    }

    #[test]
    fn linear_flow_matches_exponential() {
        let model = SlowFastModel::new(
            Mat::scalar(0.001),
            Mat::scalar(-1.0),
            zero_nonlinearity(),
            0.1,
            0.0,
            Params::new(),
        )
        .unwrap();
        let dt = 1e-3;
        let grid = TimeGrid::new(0.0, dt, 1000).unwrap();
        let path = sample_wiener(grid, 1, 1).unwrap();
        let tr = simulate_full(&model, &[2.0], &[0.0], &grid, &path).unwrap();
        let exact = 2.0 * 0.001f64.exp();
        let got = tr.slow_at(1000)[0];
        assert!(((got - exact) / exact).abs() < 10.0 * dt);
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let ex = ExampleModel::new(0.1, 0.01, 0.01).unwrap();
        let grid = TimeGrid::new(0.0, 1e-4, 0).unwrap();
        let path = sample_wiener(grid, 1, 1).unwrap();
        let tr = simulate_full(&ex.to_model(), &[3.0], &[0.5], &grid, &path).unwrap();
        assert_eq!(tr.slow, vec![3.0]);
        assert_eq!(tr.fast, vec![0.5]);
    }

    #[test]
    fn stiffness_guard_suggests_step() {
        let ex = ExampleModel::new(0.1, 0.01, 0.01).unwrap();
        let grid = TimeGrid::new(0.0, 1e-3, 10).unwrap();
        let path = sample_wiener(grid, 1, 1).unwrap();
        match simulate_full(&ex.to_model(), &[1.0], &[0.0], &grid, &path) {
            Err(Error::Stiffness { suggested, .. }) => assert!((suggested - 2e-4).abs() < 1e-15),
            other => panic!("expected stiffness error, got {other:?}"),
        }
    }

    #[test]
    fn divergence_reports_step() {
        let blowup: Arc<dyn Nonlinearity<f64>> = Arc::new(FnNonlinearity {
            f: Arc::new(|x, _, _| vec![x[0] * x[0]]),
            g: Arc::new(|_, _, _| vec![0.0]),
            g_x: Arc::new(|_, _, _| Mat::scalar(0.0)),
            g_y: Arc::new(|_, _, _| Mat::scalar(0.0)),
        });
        let model =
            SlowFastModel::new(Mat::scalar(0.0), Mat::scalar(-1.0), blowup, 1.0, 0.0, Params::new()).unwrap();
        let grid = TimeGrid::new(0.0, 0.01, 10_000).unwrap();
        let path = sample_wiener(grid, 1, 1).unwrap();
        let err = simulate_full(&model, &[10.0], &[0.0], &grid, &path).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step > 0 && step < 10_000));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn specialised_example_matches_generic_bitwise() {
        let ex = ExampleModel::new(0.3, 0.01, 0.05).unwrap();
        let grid = TimeGrid::new(0.0, 2e-4, 2000).unwrap();
        let path = sample_wiener(grid, 1, 77).unwrap();
        let a = simulate_full(&ex.to_model(), &[8.0], &[0.1], &grid, &path).unwrap();
        let b = ex.simulate(8.0, 0.1, &grid, &path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_limit_ignores_noise() {
        let ex = ExampleModel::new(0.1, 0.01, 0.0).unwrap();
        let grid = TimeGrid::new(0.0, 2e-4, 500).unwrap();
        let p1 = sample_wiener(grid, 1, 1).unwrap();
        let p2 = sample_wiener(grid, 1, 2).unwrap();
        assert_eq!(
            simulate_full(&ex.to_model(), &[5.0], &[0.0], &grid, &p1).unwrap(),
            simulate_full(&ex.to_model(), &[5.0], &[0.0], &grid, &p2).unwrap()
        );
    }

    #[test]
    fn example_derivatives_match_finite_differences() {
        let m = ExampleModel::new(0.7, 0.01, 0.01).unwrap().to_model();
        assert!(m.derivative_mismatch(100, 10.0, 3) < 1e-5);
    }

    #[test]
    fn wrong_derivative_is_detected() {
        let bad: Arc<dyn Nonlinearity<f64>> = Arc::new(FnNonlinearity {
            f: Arc::new(|_, _, _| vec![0.0]),
            g: Arc::new(|x, y, _| vec![x[0] * y[0]]),
            g_x: Arc::new(|_, y, _| Mat::scalar(y[0])),
            g_y: Arc::new(|_, _, _| Mat::scalar(0.0)),
        });
        let m = SlowFastModel::new(Mat::scalar(0.0), Mat::scalar(-1.0), bad, 0.1, 0.0, Params::new()).unwrap();
        assert!(m.derivative_mismatch(20, 2.0, 1) > 1e-3);
    }

    #[test]
    fn transform_shifts_fast_states() {
        let grid = TimeGrid::new(0.0f64, 0.1, 3).unwrap();
        let traj = Trajectory { grid, n: 1, m: 1, slow: vec![1.0, 2.0, 3.0, 4.0], fast: vec![0.5, 0.25, 0.0, -1.0] };
        let eta = StationaryPath::from_values(grid, 1, crate::noise::ProcessTag::EtaEps, vec![0.3; 4]).unwrap();
        let out = transform_random(&traj, &eta, 1.0).unwrap();
        assert_eq!(out.slow, traj.slow);
        for (a, b) in out.fast.iter().zip(&traj.fast) {
            assert!((a - (b - 0.3)).abs() < 1e-15);
        }
        assert_eq!(transform_random(&traj, &eta, 0.0).unwrap(), traj);

        let other = TimeGrid::new(0.0, 0.2, 3).unwrap();
        let eta2 = StationaryPath::from_values(other, 1, crate::noise::ProcessTag::EtaEps, vec![0.3; 4]).unwrap();
        assert!(matches!(transform_random(&traj, &eta2, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn absorbing_bound_constant_arithmetic() {
        let ex = ExampleModel::new(0.1f64, 0.01, 0.01).unwrap();
        let c = ex.absorbing_constant();
        assert!((c - (2e5 + 2e-9)).abs() < 1e-9);
        assert!(matches!(absorbing_diagnostic(&ex, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn absorbing_trivial_for_resting_path() {
        let ex = ExampleModel::new(0.1, 0.01, 0.0).unwrap();
        let grid = TimeGrid::new(0.0, 2e-4, 1000).unwrap();
        let path = sample_wiener(grid, 1, 1).unwrap();
        let tr = ex.simulate(0.0, 0.0, &grid, &path).unwrap();
        let rep = absorbing_diagnostic(&ex, &[tr]).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.max_violation_ratio <= 1.0);
    }

    #[test]
    fn spectral_constants_of_example() {
        let m = ExampleModel::new(0.1f64, 0.01, 0.01).unwrap().to_model();
        let s = m.spectral_constants().unwrap();
        assert!((s.beta - 1.0).abs() < 1e-9);
        assert!((s.k - 1.0).abs() < 1e-9);
        // g = x²/600 is only locally Lipschitz; a large local constant breaks H2
        let m = m.with_lipschitz(1.0, 2.0);
        assert!(m.warnings.iter().any(|w| w.starts_with("H2")));
        let m = m.with_lipschitz(1.0, 0.5);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn example_rejects_nonpositive_a() {
        assert!(ExampleModel::new(0.0, 0.01, 0.01).is_err());
        assert!(ExampleModel::new(0.1, 0.0, 0.01).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let grid = TimeGrid::new(0.0, 0.5, 1).unwrap();
        let traj = Trajectory { grid, n: 1, m: 1, slow: vec![1.0, 0.1], fast: vec![0.0, 1.0 / 3.0] };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,x_1,y_1");
        let last: Vec<f64> = lines[2].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(last, vec![0.5, 0.1, 1.0 / 3.0]);
    }
}
