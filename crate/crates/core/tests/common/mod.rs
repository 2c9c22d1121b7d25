//! Oracles and statistics shared by the integration suites.
#![allow(dead_code)]

use slowfast_core::noise::{sample_wiener, NoisePath, TimeGrid};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Standard error of the sample variance of iid Gaussian draws.
pub fn variance_se(var: f64, n: usize) -> f64 {
    var * (2.0 / (n - 1) as f64).sqrt()
}

/// Standard error of the sample variance of a Gaussian AR(1) series with
/// lag-one correlation `phi`.
pub fn ar1_variance_se(var: f64, n: usize, phi: f64) -> f64 {
    let inflation = (1.0 + phi * phi) / (1.0 - phi * phi);
    var * (2.0 * inflation / n as f64).sqrt()
}

/// Standard error of the sample mean of a stationary AR(1) series.
pub fn ar1_mean_se(var: f64, n: usize, phi: f64) -> f64 {
    (var / n as f64 * (1.0 + phi) / (1.0 - phi)).sqrt()
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Wiener path on `[-back·dt, forward·dt]` whose restriction to `t >= 0`
/// coincides with the one-sided path of the same seed.
pub fn two_sided(dt: f64, back: usize, forward: usize, seed: u64) -> NoisePath<f64> {
    sample_wiener(TimeGrid::new(-(back as f64) * dt, dt, back + forward).unwrap(), 1, seed).unwrap()
}

fn example_rhs(a: f64, eps: f64, x: f64, y: f64) -> (f64, f64) {
    (0.001 * x - a * x * y, (-y + x * x / 600.0) / eps)
}

/// Classical RK4 for the deterministic example over `[0, span]`.
fn flow(a: f64, eps: f64, x0: f64, y0: f64, span: f64, steps: usize) -> (f64, f64) {
    let h = span / steps as f64;
    let (mut x, mut y) = (x0, y0);
    for _ in 0..steps {
        let (k1x, k1y) = example_rhs(a, eps, x, y);
        let (k2x, k2y) = example_rhs(a, eps, x + 0.5 * h * k1x, y + 0.5 * h * k1y);
        let (k3x, k3y) = example_rhs(a, eps, x + 0.5 * h * k2x, y + 0.5 * h * k2y);
        let (k4x, k4y) = example_rhs(a, eps, x + h * k3x, y + h * k3y);
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
    }
    (x, y)
}

/// Invariant slow manifold `h*(ξ)` of the noiseless example.
///
/// Shoots from `x(-L)` with `y(-L) = x(-L)²/600` over `L = 25ε` so that
/// the coupled flow lands on `x(0) = ξ`; the fast transient has then decayed
/// by `e^{-25}` and `y(0)` lies on the manifold.
pub fn oracle_manifold(a: f64, eps: f64, xi: f64) -> f64 {
    if xi == 0.0 {
        return 0.0;
    }
    let span = 25.0 * eps;
    let steps = 2500;
    let land = |x: f64| flow(a, eps, x, x * x / 600.0, span, steps);
    let (mut s0, mut s1) = (xi, xi * 1.01);
    let (mut r0, mut r1) = (land(s0).0 - xi, land(s1).0 - xi);
    for _ in 0..60 {
        if r1 == r0 || r1.abs() < 1e-14 * xi.abs() {
            break;
        }
        let s2 = s1 - r1 * (s1 - s0) / (r1 - r0);
        (s0, r0) = (s1, r1);
        s1 = s2;
        r1 = land(s1).0 - xi;
    }
    land(s1).1
}
