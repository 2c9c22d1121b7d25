//! Synthetic observations, Monte-Carlo objectives for the full and the
//! reduced system, and the estimation pipeline.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_float, write_table};
use crate::manifold::{truncation_for, ExampleManifold};
use crate::linalg::Mat;
use crate::model::{ExampleModel, EXAMPLE_COUPLING_DENOM};
use crate::noise::{derive_seed, sample_wiener, TimeGrid};
use crate::optim::{stochastic_nelder_mead, EstimationResult, SnmOptions};
use crate::real::Real;
use crate::reduced::{simulate_slow, NoiseFreezing};

/// Seed tags separating observation noise from simulation noise.
const OBS_TAG: u64 = 0x6f62;
const INIT_TAG: u64 = 0x696e;

/// Default full-system step (`ε/50` at `ε = 0.01`).
pub const DEFAULT_DT_FULL: f64 = 2e-4;
pub const DEFAULT_DT_SLOW: f64 = 1e-2;
pub const DEFAULT_PATHS: usize = 30;
/// Noise steps per slow step for the reduced objective. The stochastic part
/// of the first-order manifold is `O(εσ)`, so a coarse noise grid suffices.
pub const DEFAULT_SLOW_NOISE_SUBSTEPS: usize = 10;
pub const DEFAULT_INIT_BOX: (f64, f64) = (0.01, 2.0);
pub const DEFAULT_X0: f64 = 10.0;
pub const DEFAULT_DATA_FILE: &str = "observations.csv";

/// `y₀ = x₀²/600`, the leading-order manifold height.
pub fn default_y0<T: Real>(x0: T) -> T {
    x0 * x0 / T::lit(EXAMPLE_COUPLING_DENOM)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Full,
    Slow,
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            System::Full => "full",
            System::Slow => "slow",
        })
    }
}

/// Everything needed to regenerate an observation set bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationMeta<T> {
    pub a_true: Option<T>,
    pub eps: T,
    pub sigma: T,
    pub dt: T,
    pub seed: u64,
    pub x0: T,
    pub y0: T,
    pub samples: usize,
    pub has_fast: bool,
    /// CSV file holding the data, relative to the metadata file.
    pub data_file: String,
}

/// Observations `x_ob[i][j]` (and optionally `y_ob[i][j]`) of the example at
/// instants `t_i` for samples `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet<T> {
    pub times: Vec<T>,
    /// Row-major `I x J`.
    pub x: Vec<T>,
    pub y: Option<Vec<T>>,
    pub meta: ObservationMeta<T>,
}

impl<T: Real> ObservationSet<T> {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_samples(&self) -> usize {
        self.meta.samples
    }

    pub fn x_at(&self, i: usize, j: usize) -> T {
        self.x[i * self.meta.samples + j]
    }

    pub fn y_at(&self, i: usize, j: usize) -> Option<T> {
        self.y.as_ref().map(|y| y[i * self.meta.samples + j])
    }

    pub fn validate(&self) -> Result<()> {
        let (i, j) = (self.times.len(), self.meta.samples);
        if i == 0 || j == 0 {
            return Err(Error::Config("observation set needs at least one time and one sample".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("observation times must be strictly increasing".into()));
        }
        if self.x.len() != i * j || self.y.as_ref().is_some_and(|y| y.len() != i * j) {
            return Err(Error::Config("observation arrays do not match I x J".into()));
        }
        if self.y.is_some() != self.meta.has_fast {
            return Err(Error::Config("fast observations present/absent contrary to metadata".into()));
        }
        Ok(())
    }

    /// Writes the CSV named by `meta.data_file` and the metadata next to it
    /// (same stem, `.json`), returning the metadata path.
    pub fn write_files(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        let meta = &self.meta;
        let stem = Path::new(&meta.data_file)
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| !s.is_empty() && Path::new(&meta.data_file).file_name() == Some(meta.data_file.as_ref()))
            .ok_or_else(|| Error::Config(format!("invalid data file name `{}`", meta.data_file)))?;
        fs::create_dir_all(dir)?;
        let mut header = vec!["t", "sample", "x"];
        if self.y.is_some() {
            header.push("y");
        }
        let j_count = self.meta.samples;
        let rows = (0..self.times.len()).flat_map(|i| {
            (0..j_count).map(move |j| {
                let mut row = vec![fmt_float(self.times[i]), j.to_string(), fmt_float(self.x_at(i, j))];
                if let Some(y) = self.y_at(i, j) {
                    row.push(fmt_float(y));
                }
                row
            })
        });
        let csv = fs::File::create(dir.join(&meta.data_file))?;
        write_table(std::io::BufWriter::new(csv), &header, rows)?;
        let json_path = dir.join(format!("{stem}.json"));
        let mut f = fs::File::create(&json_path)?;
        serde_json::to_writer_pretty(&mut f, meta).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(f)?;
        Ok(json_path)
    }

    /// Reads a metadata file written by [`Self::write_files`] and its CSV.
    pub fn read_files(json_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(json_path)?;
        let meta: ObservationMeta<T> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", json_path.display())))?;
        let csv_path = json_path.parent().unwrap_or(Path::new(".")).join(&meta.data_file);
        let reader = BufReader::new(fs::File::open(&csv_path)?);
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let want = if meta.has_fast { "t,sample,x,y" } else { "t,sample,x" };
        if header.trim() != want {
            return Err(Error::Config(format!("{}: expected header `{want}`", csv_path.display())));
        }
        let bad = |line: usize, what: &str| Error::Config(format!("{}:{line}: {what}", csv_path.display()));
        let parse = |s: &str, line: usize| -> Result<T> {
            s.trim().parse::<f64>().map(T::lit).map_err(|_| bad(line, "invalid number"))
        };
        let j_count = meta.samples;
        let (mut times, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = row + 2;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != header.split(',').count() {
                return Err(bad(lineno, "wrong number of columns"));
            }
            let t = parse(cols[0], lineno)?;
            let j: usize = cols[1].trim().parse().map_err(|_| bad(lineno, "invalid sample index"))?;
            if j != row % j_count.max(1) {
                return Err(bad(lineno, "samples out of order"));
            }
            if j == 0 {
                times.push(t);
            } else if times.last() != Some(&t) {
                return Err(bad(lineno, "time changes within a sample block"));
            }
            x.push(parse(cols[2], lineno)?);
            if meta.has_fast {
                y.push(parse(cols[3], lineno)?);
            }
        }
        let set = Self {
            times,
            x,
            y: meta.has_fast.then_some(y),
            meta,
        };
        set.validate()?;
        Ok(set)
    }
}

/// `count` equispaced instants `horizon·i/count`, `i = 1..=count`.
pub fn equispaced_times<T: Real>(horizon: T, count: usize) -> Result<Vec<T>> {
    if count == 0 || !(horizon > T::zero()) {
        return Err(Error::Config("need a positive horizon and at least one observation time".into()));
    }
    Ok((1..=count)
        .map(|i| horizon * T::from_usize_lossy(i) / T::from_usize_lossy(count))
        .collect())
}

/// Node indices of `times` on a grid of step `dt` starting at zero.
fn node_indices<T: Real>(times: &[T], dt: T) -> Result<Vec<usize>> {
    let last = *times.last().ok_or_else(|| Error::Config("no observation times".into()))?;
    let grid = TimeGrid::new(T::zero(), dt, (last / dt).round().to_usize().unwrap_or(0))?;
    times
        .iter()
        .map(|&t| {
            grid.index_of(t).ok_or_else(|| {
                Error::Config(format!(
                    "observation time {t} is not a multiple of dt = {dt}; choose dt dividing every t_i"
                ))
            })
        })
        .collect()
}

/// Noise seed of observation sample `j`.
pub fn observation_seed(master: u64, j: usize) -> u64 {
    derive_seed(master, &[OBS_TAG, j as u64])
}

/// Simulates the example `samples` times from `(x0, y0)` and records the
/// states at `times`.
pub fn generate_observations<T: Real>(
    example: &ExampleModel<T>,
    x0: T,
    y0: T,
    times: &[T],
    samples: usize,
    dt: T,
    seed: u64,
) -> Result<ObservationSet<T>> {
    if samples == 0 {
        return Err(Error::Config("need at least one observation sample".into()));
    }
    let idx = node_indices(times, dt)?;
    let grid = TimeGrid::new(T::zero(), dt, *idx.last().unwrap_or(&0))?;
    let runs: Vec<Result<(Vec<T>, Vec<T>)>> = (0..samples)
        .into_par_iter()
        .map(|j| {
            let path = sample_wiener(grid, 1, observation_seed(seed, j))?;
            let tr = example.simulate(x0, y0, &grid, &path)?;
            Ok((idx.iter().map(|&k| tr.slow[k]).collect(), idx.iter().map(|&k| tr.fast[k]).collect()))
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let (i_count, j_count) = (times.len(), samples);
    let mut x = vec![T::zero(); i_count * j_count];
    let mut y = vec![T::zero(); i_count * j_count];
    for (j, (xs, ys)) in runs.iter().enumerate() {
        for i in 0..i_count {
            x[i * j_count + j] = xs[i];
            y[i * j_count + j] = ys[i];
        }
    }
    Ok(ObservationSet {
        times: times.to_vec(),
        x,
        y: Some(y),
        meta: ObservationMeta {
            a_true: Some(example.a),
            eps: example.eps,
            sigma: example.sigma,
            dt,
            seed,
            x0,
            y0,
            samples,
            has_fast: true,
            data_file: DEFAULT_DATA_FILE.into(),
        },
    })
}

/// Monte-Carlo objective definition.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec<T> {
    pub system: System,
    pub obs: Arc<ObservationSet<T>>,
    /// Monte-Carlo paths per evaluation.
    pub paths: usize,
    /// Example with the free parameter `a` replaced on evaluation.
    pub template: ExampleModel<T>,
    pub free_param: String,
    pub dt_full: T,
    pub dt_slow: T,
    /// Noise step behind the manifold of the reduced system; must divide
    /// `dt_slow`.
    pub slow_noise_dt: T,
    /// Reuse observation noise for simulation path `p` (sample `p mod J`).
    pub common_random_numbers: bool,
    pub freezing: NoiseFreezing,
}

impl<T: Real> ObjectiveSpec<T> {
    /// Defaults: 30 paths, `dt = 2·10⁻⁴` (full) and `10⁻²` (slow), `ε`, `σ`
    /// taken from the observations.
    pub fn new(system: System, obs: Arc<ObservationSet<T>>) -> Result<Self> {
        let template = ExampleModel::new(obs.meta.a_true.unwrap_or(T::one()), obs.meta.eps, obs.meta.sigma)?;
        let spec = Self {
            system,
            template,
            free_param: "a".into(),
            paths: DEFAULT_PATHS,
            dt_full: obs.meta.dt,
            dt_slow: T::lit(DEFAULT_DT_SLOW),
            slow_noise_dt: T::lit(DEFAULT_DT_SLOW / DEFAULT_SLOW_NOISE_SUBSTEPS as f64),
            common_random_numbers: false,
            freezing: NoiseFreezing::Frozen,
            obs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Config("Monte-Carlo path count M must be at least 1".into()));
        }
        if !self.template.to_model().params.contains(&self.free_param) {
            return Err(Error::Config(format!("model has no parameter `{}`", self.free_param)));
        }
        self.obs.validate()?;
        if self.system == System::Full && self.obs.y.is_none() {
            return Err(Error::Config("the full-system objective needs fast observations".into()));
        }
        node_indices(&self.obs.times, self.dt_full)?;
        if self.system == System::Slow {
            node_indices(&self.obs.times, self.dt_slow)?;
            let stride = self.dt_slow / self.slow_noise_dt;
            if (stride - stride.round()).abs() > T::lit(1e-6) || stride < T::one() - T::lit(1e-9) {
                return Err(Error::Config("slow step must be a whole multiple of the slow noise step".into()));
            }
        }
        Ok(())
    }

    fn path_seed(&self, sample_seed: u64, p: usize) -> u64 {
        if self.common_random_numbers {
            observation_seed(self.obs.meta.seed, p % self.obs.meta.samples)
        } else {
            derive_seed(sample_seed, &[p as u64])
        }
    }

    /// Residual sum `Σ_i Σ_j (...)²` of one simulated path.
    fn residual(&self, xs: &[T], ys: Option<&[T]>) -> T {
        let obs = &self.obs;
        let mut acc = T::zero();
        for (i, &x) in xs.iter().enumerate() {
            for j in 0..obs.n_samples() {
                let dx = x - obs.x_at(i, j);
                acc = acc + dx * dx;
                if let (Some(ys), Some(yo)) = (ys, obs.y_at(i, j)) {
                    let dy = ys[i] - yo;
                    acc = acc + dy * dy;
                }
            }
        }
        acc
    }

    fn full_path(&self, ex: &ExampleModel<T>, seed: u64, idx: &[usize], grid: &TimeGrid<T>) -> Result<T> {
        let path = sample_wiener(*grid, 1, seed)?;
        let tr = ex.simulate(self.obs.meta.x0, self.obs.meta.y0, grid, &path)?;
        let xs: Vec<T> = idx.iter().map(|&k| tr.slow[k]).collect();
        let ys: Vec<T> = idx.iter().map(|&k| tr.fast[k]).collect();
        Ok(self.residual(&xs, Some(&ys)))
    }

    fn slow_path(&self, ex: &ExampleModel<T>, seed: u64, idx: &[usize], grid: &TimeGrid<T>, back: usize) -> Result<T> {
        let dt = self.slow_noise_dt;
        let forward = (grid.t_end() / dt).round().to_usize().unwrap_or(0);
        let noise_grid = TimeGrid::new(-T::from_usize_lossy(back) * dt, dt, back + forward)?;
        let noise = sample_wiener(noise_grid, 1, seed)?;
        let manifold = ExampleManifold::new(*ex, &noise)?;
        let tr = simulate_slow(&ex.to_model(), &manifold, &[self.obs.meta.x0], grid, self.freezing)?;
        let xs: Vec<T> = idx.iter().map(|&k| tr.slow[k]).collect();
        Ok(self.residual(&xs, None))
    }

    /// `F(a)` or `𝔽(a)` averaged over `M` paths seeded from `sample_seed`.
    /// Invalid or divergent candidates give `+∞`.
    pub fn evaluate(&self, a: T, sample_seed: u64) -> T {
        let Ok(ex) = ExampleModel::new(a, self.template.eps, self.template.sigma) else {
            return T::infinity();
        };
        let (dt, slow) = match self.system {
            System::Full => (self.dt_full, false),
            System::Slow => (self.dt_slow, true),
        };
        let Ok(idx) = node_indices(&self.obs.times, dt) else {
            return T::infinity();
        };
        let Ok(grid) = TimeGrid::new(T::zero(), dt, *idx.last().unwrap_or(&0)) else {
            return T::infinity();
        };
        let back = if slow {
            let Ok(trunc) = truncation_for(&Mat::scalar(-T::one())) else {
                return T::infinity();
            };
            (trunc * self.template.eps / self.slow_noise_dt).ceil().to_usize().unwrap_or(0)
        } else {
            0
        };
        let per_path: Vec<T> = (0..self.paths)
            .into_par_iter()
            .map(|p| {
                let seed = self.path_seed(sample_seed, p);
                let r = if slow {
                    self.slow_path(&ex, seed, &idx, &grid, back)
                } else {
                    self.full_path(&ex, seed, &idx, &grid)
                };
                r.unwrap_or(T::infinity())
            })
            .collect();
        // fixed summation order regardless of thread count
        let total = per_path.iter().fold(T::zero(), |acc, &v| acc + v);
        if total.is_finite() {
            total / T::from_usize_lossy(self.paths)
        } else {
            T::infinity()
        }
    }
}

pub fn objective_full<T: Real>(a: T, spec: &ObjectiveSpec<T>, sample_seed: u64) -> Result<T> {
    if spec.system != System::Full {
        return Err(Error::Config("objective_full needs a full-system spec".into()));
    }
    Ok(spec.evaluate(a, sample_seed))
}

pub fn objective_slow<T: Real>(a: T, spec: &ObjectiveSpec<T>, sample_seed: u64) -> Result<T> {
    if spec.system != System::Slow {
        return Err(Error::Config("objective_slow needs a slow-system spec".into()));
    }
    Ok(spec.evaluate(a, sample_seed))
}

/// Objective values over a parameter grid, all with the same sample seed.
pub fn objective_grid<T: Real>(spec: &ObjectiveSpec<T>, a_values: &[T], sample_seed: u64) -> Vec<(T, T)> {
    a_values.iter().map(|&a| (a, spec.evaluate(a, sample_seed))).collect()
}

/// `a,objective` rows.
pub fn write_grid_csv<T: Real, W: Write>(grid: &[(T, T)], w: W) -> Result<()> {
    let rows = grid.iter().map(|&(a, f)| vec![fmt_float(a), fmt_float(f)]);
    write_table(w, &["a", "objective"], rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig<T> {
    pub init_box: (T, T),
    pub snm: SnmOptions<T>,
    pub seed: u64,
}

impl<T: Real> Default for EstimateConfig<T> {
    fn default() -> Self {
        Self {
            init_box: (T::lit(DEFAULT_INIT_BOX.0), T::lit(DEFAULT_INIT_BOX.1)),
            snm: SnmOptions::default(),
            seed: 0,
        }
    }
}

/// Two distinct initial guesses drawn uniformly from the box.
pub fn initial_guesses<T: Real>(init_box: (T, T), seed: u64) -> Result<[T; 2]> {
    let (lo, hi) = init_box;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("init box [{lo}, {hi}] is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[INIT_TAG]));
    let mut draw = || lo + (hi - lo) * T::lit(rng.gen::<f64>());
    let a0 = draw();
    let mut a1 = draw();
    while a1 == a0 {
        a1 = draw();
    }
    Ok([a0, a1])
}

/// Runs the stochastic Nelder–Mead search on the objective of `spec`.
pub fn estimate_parameter<T: Real>(spec: &ObjectiveSpec<T>, config: &EstimateConfig<T>) -> Result<EstimationResult<T>> {
    spec.validate()?;
    let [a0, a1] = initial_guesses(config.init_box, config.seed)?;
    let mut snm = config.snm.clone();
    snm.seed = derive_seed(config.seed, &[spec.system as u64]);
    if snm.bounds.is_none() {
        snm.bounds = Some(vec![config.init_box]);
    }
    stochastic_nelder_mead(|a: &[T], s| spec.evaluate(a[0], s), &[vec![a0], vec![a1]], &snm)
}
