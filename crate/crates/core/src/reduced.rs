//! The reduced slow system on the approximate random slow manifold, and the
//! distance of full-system orbits to that manifold.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_float, write_table};
use crate::manifold::SlowManifold;
use crate::model::{SlowFastModel, Trajectory, DIVERGENCE_THRESHOLD};
use crate::noise::TimeGrid;
use crate::real::{norm, Real};

/// Which stationary noise value enters the reduced drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFreezing {
    /// `σ η(ψ_ε ω)`, one value per realisation.
    #[default]
    Frozen,
    /// `σ η(θ_{t/ε} ψ_ε ω)`, advanced with time. Sensitivity studies only.
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowTrajectory<T> {
    pub grid: TimeGrid<T>,
    pub n: usize,
    pub m: usize,
    /// Row-major `(n_steps + 1) x n`.
    pub slow: Vec<T>,
    /// Manifold value `y = σ η + ĥ(x)` used at each node, row-major.
    pub manifold: Vec<T>,
}

impl<T: Real> SlowTrajectory<T> {
    pub fn slow_at(&self, k: usize) -> &[T] {
        &self.slow[k * self.n..(k + 1) * self.n]
    }

    pub fn manifold_at(&self, k: usize) -> &[T] {
        &self.manifold[k * self.m..(k + 1) * self.m]
    }

    pub fn len(&self) -> usize {
        self.slow.len() / self.n.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.slow.is_empty()
    }

    /// Rows `t,x_1..x_n`, plus `y_1..y_m` manifold columns when requested.
    pub fn write_csv<W: Write>(&self, w: W, emit_manifold: bool) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x_{i}")));
        if emit_manifold {
            header.extend((1..=self.m).map(|i| format!("y_{i}")));
        }
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = (0..self.len()).map(|k| {
            let mut row = vec![fmt_float(self.grid.node(k))];
            row.extend(self.slow_at(k).iter().map(|&v| fmt_float(v)));
            if emit_manifold {
                row.extend(self.manifold_at(k).iter().map(|&v| fmt_float(v)));
            }
            row
        });
        write_table(w, &header_refs, rows)
    }
}

/// Fast-node shift of every node of `grid` on the manifold's noise.
fn shifts<T: Real>(manifold: &dyn SlowManifold<T>, grid: &TimeGrid<T>) -> Result<Vec<usize>> {
    grid.validate()?;
    if grid.t_start < T::zero() {
        return Err(Error::Domain("reduced system starts before the manifold origin".into()));
    }
    grid.nodes().map(|t| manifold.noise().shift_for_time(t)).collect()
}

/// Explicit Euler for `ẋ = Ax + f(x, ĥ(x, θ_t ω) + σ η(ψ_ε ω))`.
///
/// The fast drift `g` is never evaluated here; it only enters through the
/// manifold.
pub fn simulate_slow<T: Real>(
    model: &SlowFastModel<T>,
    manifold: &dyn SlowManifold<T>,
    x0: &[T],
    grid: &TimeGrid<T>,
    freezing: NoiseFreezing,
) -> Result<SlowTrajectory<T>> {
    let (n, m) = (model.n(), model.m());
    if manifold.slow_dim() != n || manifold.fast_dim() != m {
        return Err(Error::Config("manifold dimensions do not match the model".into()));
    }
    if x0.len() != n {
        return Err(Error::Config("initial condition has wrong dimension".into()));
    }
    let shift = shifts(manifold, grid)?;
    let sigma = manifold.sigma();
    let frozen: Vec<T> = manifold.noise().eta_at(0).iter().map(|&e| sigma * e).collect();
    let threshold = T::lit(DIVERGENCE_THRESHOLD);
    let dt = grid.dt;

    let mut slow = Vec::with_capacity(shift.len() * n);
    let mut fast = Vec::with_capacity(shift.len() * m);
    let mut x = x0.to_vec();
    let mut drift = vec![T::zero(); n];
    let mut y = vec![T::zero(); m];
    for (k, &s) in shift.iter().enumerate() {
        let h = manifold.h_hat_shifted(&x, s)?;
        match freezing {
            NoiseFreezing::Frozen => {
                for i in 0..m {
                    y[i] = frozen[i] + h[i];
                }
            }
            NoiseFreezing::Shifted => {
                let eta = manifold.noise().eta_at(s);
                for i in 0..m {
                    y[i] = sigma * eta[i] + h[i];
                }
            }
        }
        slow.extend_from_slice(&x);
        fast.extend_from_slice(&y);
        if k + 1 == shift.len() {
            break;
        }
        model.slow_drift(&x, &y, &mut drift);
        for i in 0..n {
            x[i] = x[i] + dt * drift[i];
        }
        let size = norm(&x);
        if !size.is_finite() || size > threshold {
            return Err(Error::Divergence {
                step: k + 1,
                t: grid.node(k + 1).as_f64(),
                detail: format!("slow state norm {size} is non-finite or exceeds {DIVERGENCE_THRESHOLD:e}"),
            });
        }
    }
    Ok(SlowTrajectory {
        grid: *grid,
        n,
        m,
        slow,
        manifold: fast,
    })
}

/// `d(t_k) = |y(t_k) - σ η(θ_{t_k/ε} ψ_ε ω) - ĥ(x(t_k), θ_{t_k} ω)|` along a
/// full-system trajectory driven by the same noise.
pub fn attraction_distance<T: Real>(full: &Trajectory<T>, manifold: &dyn SlowManifold<T>) -> Result<Vec<(T, T)>> {
    if manifold.slow_dim() != full.n || manifold.fast_dim() != full.m {
        return Err(Error::Config("manifold dimensions do not match the trajectory".into()));
    }
    let shift = shifts(manifold, &full.grid)?;
    let mut out = Vec::with_capacity(shift.len());
    let mut diff = vec![T::zero(); full.m];
    for (k, &s) in shift.iter().enumerate() {
        let target = manifold.full_shifted(full.slow_at(k), s)?;
        for ((d, &y), &h) in diff.iter_mut().zip(full.fast_at(k)).zip(&target) {
            *d = y - h;
        }
        out.push((full.grid.node(k), norm(&diff)));
    }
    Ok(out)
}

/// `t,distance` rows.
pub fn write_attraction_csv<T: Real, W: Write>(series: &[(T, T)], w: W) -> Result<()> {
    let rows = series.iter().map(|&(t, d)| vec![fmt_float(t), fmt_float(d)]);
    write_table(w, &["t", "distance"], rows)
}
