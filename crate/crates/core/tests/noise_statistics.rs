mod common;

use common::{ar1_mean_se, ar1_variance_se, mean, variance, variance_se};
use proptest::prelude::*;
use slowfast_core::noise::{
    default_truncation, derive_seed, ou_stationary_path, rescale_noise, sample_wiener, stationary_integral, TimeGrid,
};
use slowfast_core::Mat;
use statrs::distribution::{ContinuousCDF, Normal};

fn ou_values(eps: f64, nodes: usize, seed: u64) -> (Vec<f64>, f64) {
    // lag-one correlation e^{-dt/ε} = e^{-0.1}
    let dt = 0.1 * eps;
    let path = sample_wiener(TimeGrid::new(0.0, dt, nodes - 1).unwrap(), 1, seed).unwrap();
    let eta = ou_stationary_path(&Mat::scalar(-1.0), eps, &path).unwrap();
    (eta.values().to_vec(), (-0.1f64).exp())
}

#[test]
fn ou_stationary_variance_is_one_half() {
    let nodes = 1_000_000;
    for &eps in &[0.01, 0.1] {
        let (v, phi) = ou_values(eps, nodes, 11);
        let var = variance(&v);
        let se = ar1_variance_se(0.5, nodes, phi);
        assert!((var - 0.5).abs() < 3.0 * se, "eps {eps}: variance {var}, se {se}");
        let m = mean(&v);
        assert!(m.abs() < 3.0 * ar1_mean_se(0.5, nodes, phi), "eps {eps}: mean {m}");
    }
}

#[test]
fn ou_autocovariance_decays_exponentially() {
    let nodes = 1_000_000;
    let eps = 0.01;
    let (v, phi) = ou_values(eps, nodes, 12);
    let lag = 10;
    let m = mean(&v);
    let cov = v.iter().zip(&v[lag..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / (nodes - lag) as f64;
    let expected = 0.5 * (-(lag as f64) * 0.1f64).exp();
    // the lag covariance has about the same sampling error as the variance
    assert!((cov - expected).abs() < 3.0 * ar1_variance_se(0.5, nodes, phi), "cov {cov} vs {expected}");
}

fn isometry_samples(kernel: impl Fn(f64) -> f64 + Copy, paths: u64) -> Vec<f64> {
    let trunc: f64 = default_truncation(1.0, 1e-8);
    let dt = 0.002;
    let n = (trunc / dt).ceil() as usize;
    let grid = TimeGrid::new(-(n as f64) * dt, dt, n).unwrap();
    (0..paths)
        .map(|p| {
            let path = sample_wiener(grid, 1, derive_seed(77, &[p])).unwrap();
            stationary_integral(kernel, &path, trunc).unwrap()
        })
        .collect()
}

#[test]
fn ito_isometry_for_exponential_kernels() {
    let paths = 10_000;
    let e = isometry_samples(|s: f64| s.exp(), paths);
    let var = variance(&e);
    assert!((var - 0.5).abs() < 3.0 * variance_se(0.5, paths as usize), "e^s: {var}");

    let se = isometry_samples(|s: f64| s * s.exp(), paths);
    let var = variance(&se);
    assert!((var - 0.25).abs() < 3.0 * variance_se(0.25, paths as usize), "s e^s: {var}");
}

#[test]
fn rescaled_increments_pass_kolmogorov_smirnov() {
    let eps = 0.01;
    let n = 10_000;
    let path = sample_wiener(TimeGrid::new(0.0f64, 1e-4, n).unwrap(), 1, 5).unwrap();
    let fast = rescale_noise(&path, eps, 1).unwrap();
    let law = Normal::new(0.0, fast.grid.dt.sqrt()).unwrap();
    let mut z = fast.increments().to_vec();
    z.sort_by(f64::total_cmp);
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = law.cdf(x);
            (c - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - c)
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

#[test]
fn two_sided_path_extends_one_sided_path() {
    let dt = 1e-3;
    let one = sample_wiener(TimeGrid::new(0.0, dt, 500).unwrap(), 1, 9).unwrap();
    let two = common::two_sided(dt, 300, 500, 9);
    let right = two.window(0.0, 0.5).unwrap();
    assert_eq!(right.increments(), one.increments());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rescaling_preserves_total_displacement(seed in any::<u64>(), k in 1u32..6, stride in 1usize..5) {
        let eps = 0.5f64.powi(k as i32);
        let path = sample_wiener(TimeGrid::new(0.0, 1e-3, 60).unwrap(), 1, seed).unwrap();
        let fast = rescale_noise(&path, eps, stride).unwrap();
        let src: f64 = path.increments().iter().sum();
        let out: f64 = fast.increments().iter().sum::<f64>() * eps.sqrt();
        prop_assert!((src - out).abs() < 1e-12);
        prop_assert!((fast.grid.dt - 1e-3 * stride as f64 / eps).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_a_pure_function_of_seed(seed in any::<u64>(), start in -50i64..50, n in 0usize..200) {
        let grid = TimeGrid::new(start as f64 * 0.01, 0.01, n).unwrap();
        let a = sample_wiener(grid, 2, seed).unwrap();
        let b = sample_wiener(grid, 2, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ou_noiseless_recursion_is_exponential_decay(eps in 0.01f64..1.0, steps in 1usize..50) {
        let dt = eps / 20.0;
        let grid = TimeGrid::new(0.0, dt, steps).unwrap();
        let path = slowfast_core::noise::NoisePath::from_increments(grid, 1, 3, vec![0.0; steps]).unwrap();
        let eta = ou_stationary_path(&Mat::scalar(-1.0), eps, &path).unwrap();
        let v = eta.values();
        let expected = v[0] * (-(steps as f64) * dt / eps).exp();
        prop_assert!((v[steps] - expected).abs() <= 1e-12 * v[0].abs().max(1.0));
    }
}
