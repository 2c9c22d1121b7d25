//! Subcommand implementations. Every output file is a pure function of the
//! configuration and the master seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use slowfast_core::estimate::{
    equispaced_times, estimate_parameter, generate_observations, objective_grid, write_grid_csv, EstimateConfig,
    ObjectiveSpec, ObservationSet, System,
};
use slowfast_core::manifold::{
    manifold_noise, truncation_for, write_manifold_csv, ExampleManifold, ManifoldApprox, ManifoldOptions,
    SlowManifold,
};
use slowfast_core::model::{absorbing_diagnostic, ExampleModel};
use slowfast_core::noise::{derive_seed, sample_wiener, NoisePath, TimeGrid};
use slowfast_core::optim::SnmOptions;
use slowfast_core::reduced::{attraction_distance, simulate_slow, write_attraction_csv};
use slowfast_core::{Error, Mat, Result};

use crate::config::RunConfig;

const SIMULATE_TAG: u64 = 0x73696d;
const GRID_TAG: u64 = 0x677264;
const MANIFOLD_TAG: u64 = 0x6d6e66;
const ATTRACTION_TAG: u64 = 0x617472;
const ABSORBING_TAG: u64 = 0x616273;

pub struct Context {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub emit_manifold: bool,
}

impl Context {
    fn seed(&self) -> u64 {
        self.cfg.seeds.master
    }

    fn example(&self) -> Result<ExampleModel<f64>> {
        let m = &self.cfg.model;
        ExampleModel::new(m.a_true, m.epsilon, m.sigma)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        let file = File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok((path, BufWriter::new(file)))
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<PathBuf> {
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(path)
    }

    fn full_grid(&self, horizon: f64) -> Result<TimeGrid<f64>> {
        TimeGrid::spanning(0.0, horizon, self.cfg.simulation.dt)
    }

    /// Noise on `[-T ε, horizon]` with step `dt`, whose part on `t >= 0`
    /// equals `sample_wiener` on `[0, horizon]` with the same seed.
    fn two_sided_noise(&self, dt: f64, horizon: f64, seed: u64) -> Result<NoisePath<f64>> {
        let trunc = truncation_for(&Mat::scalar(-1.0))?;
        let back = (trunc * self.cfg.model.epsilon / dt).ceil() as usize;
        let forward = TimeGrid::spanning(0.0, horizon, dt)?.n_steps;
        sample_wiener(TimeGrid::new(-(back as f64) * dt, dt, back + forward)?, 1, seed)
    }

    fn observations(&self) -> Result<ObservationSet<f64>> {
        if let Some(file) = &self.cfg.observations.file {
            return ObservationSet::read_files(file);
        }
        let s = &self.cfg.simulation;
        let times = equispaced_times(s.horizon, self.cfg.observations.count)?;
        generate_observations(
            &self.example()?,
            s.x0,
            self.cfg.y0(),
            &times,
            self.cfg.observations.samples,
            s.dt,
            self.seed(),
        )
    }

    fn objective_spec(&self, obs: ObservationSet<f64>) -> Result<ObjectiveSpec<f64>> {
        let e = &self.cfg.estimation;
        let mut spec = ObjectiveSpec::new(e.system, Arc::new(obs))?;
        spec.paths = e.paths;
        spec.dt_slow = self.cfg.simulation.dt_slow;
        spec.slow_noise_dt = self.cfg.simulation.dt_slow / e.slow_noise_substeps as f64;
        spec.common_random_numbers = e.common_random_numbers;
        spec.freezing = e.noise_freezing;
        spec.validate()?;
        Ok(spec)
    }

    fn general_manifold(&self, noise: &NoisePath<f64>) -> Result<Box<dyn SlowManifold<f64>>> {
        let ex = self.example()?;
        if self.cfg.manifold.closed_form {
            Ok(Box::new(ExampleManifold::new(ex, noise)?))
        } else {
            Ok(Box::new(ManifoldApprox::new(&ex.to_model(), noise, ManifoldOptions::default())?))
        }
    }
}

/// Paths written by a subcommand, echoed on stdout.
#[derive(Debug, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    pub files: Vec<PathBuf>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

impl Outcome {
    fn new(command: &'static str, files: Vec<PathBuf>) -> Self {
        Self {
            command,
            files,
            summary: serde_json::Value::Null,
        }
    }
}

pub fn generate_obs(ctx: &Context) -> Result<Outcome> {
    let obs = ctx.observations()?;
    let path = obs.write_files(&ctx.out_dir)?;
    let csv = ctx.out_dir.join(&obs.meta.data_file);
    Ok(Outcome::new("generate-obs", vec![path, csv]))
}

pub fn simulate(ctx: &Context) -> Result<Outcome> {
    let s = &ctx.cfg.simulation;
    let ex = ctx.example()?;
    let seed = derive_seed(ctx.seed(), &[SIMULATE_TAG]);
    match ctx.cfg.estimation.system {
        System::Full => {
            let grid = ctx.full_grid(s.horizon)?;
            let path = sample_wiener(grid, 1, seed)?;
            let tr = ex.simulate(s.x0, ctx.cfg.y0(), &grid, &path)?;
            let (file, mut w) = ctx.create("trajectory_full.csv")?;
            tr.write_csv(&mut w)?;
            w.flush()?;
            Ok(Outcome::new("simulate", vec![file]))
        }
        System::Slow => {
            let noise_dt = s.dt_slow / ctx.cfg.estimation.slow_noise_substeps as f64;
            let noise = ctx.two_sided_noise(noise_dt, s.horizon, seed)?;
            let manifold = ExampleManifold::new(ex, &noise)?;
            let grid = TimeGrid::spanning(0.0, s.horizon, s.dt_slow)?;
            let tr = simulate_slow(&ex.to_model(), &manifold, &[s.x0], &grid, ctx.cfg.estimation.noise_freezing)?;
            let (file, mut w) = ctx.create("trajectory_slow.csv")?;
            tr.write_csv(&mut w, ctx.emit_manifold)?;
            w.flush()?;
            Ok(Outcome::new("simulate", vec![file]))
        }
    }
}

pub fn manifold_eval(ctx: &Context) -> Result<Outcome> {
    let ex = ctx.example()?;
    let seed = derive_seed(ctx.seed(), &[MANIFOLD_TAG]);
    let noise = manifold_noise(&Mat::scalar(-1.0), ex.eps, 0.0, seed)?;
    let manifold = ctx.general_manifold(&noise)?;
    let m = &ctx.cfg.manifold;
    let (file, mut w) = ctx.create("manifold.csv")?;
    write_manifold_csv(manifold.as_ref(), m.xi_min, m.xi_max, m.points, &mut w)?;
    w.flush()?;
    Ok(Outcome::new("manifold-eval", vec![file]))
}

pub fn objective_grid_cmd(ctx: &Context) -> Result<Outcome> {
    let spec = ctx.objective_spec(ctx.observations()?)?;
    let g = &ctx.cfg.grid;
    let count = ((g.a_max - g.a_min) / g.step + 1e-9).floor() as usize;
    let values: Vec<f64> = (0..=count).map(|k| g.a_min + k as f64 * g.step).collect();
    let table = objective_grid(&spec, &values, derive_seed(ctx.seed(), &[GRID_TAG]));
    let name = format!("objective_grid_{}.csv", spec.system);
    let (file, mut w) = ctx.create(&name)?;
    write_grid_csv(&table, &mut w)?;
    w.flush()?;
    let (a_min, f_min) = table
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((f64::NAN, f64::NAN));
    let mut out = Outcome::new("objective-grid", vec![file]);
    out.summary = serde_json::json!({ "system": spec.system, "argmin": a_min, "min": f_min });
    Ok(out)
}

pub fn estimate(ctx: &Context) -> Result<Outcome> {
    let spec = ctx.objective_spec(ctx.observations()?)?;
    let e = &ctx.cfg.estimation;
    let config = EstimateConfig {
        init_box: e.init_box,
        snm: SnmOptions {
            tol_x: e.tol_x,
            tol_f: e.tol_f,
            max_iter: e.max_iter,
            stall_window: e.stall_window,
            stall_tol: e.stall_tol,
            bounds: None,
            max_restarts: e.max_restarts,
            seed: 0,
        },
        seed: ctx.seed(),
    };
    let mut result = estimate_parameter(&spec, &config)?;
    result.config = serde_json::json!({
        "system": spec.system,
        "master_seed": ctx.seed(),
        "observation_seed": spec.obs.meta.seed,
        "run": ctx.cfg,
    });
    let name = format!("estimate_{}", spec.system);
    let json = ctx.write_json(&format!("{name}.json"), &result)?;
    let (trace, mut w) = ctx.create(&format!("{name}_trace.csv"))?;
    result.write_trace_csv(&mut w)?;
    w.flush()?;
    let mut out = Outcome::new("estimate", vec![json, trace]);
    out.summary = serde_json::json!({
        "system": spec.system,
        "estimate": result.estimate[0],
        "best_objective": result.best_objective,
        "termination": result.termination,
    });
    Ok(out)
}

pub fn attraction(ctx: &Context) -> Result<Outcome> {
    let ex = ctx.example()?;
    let s = &ctx.cfg.simulation;
    let a = &ctx.cfg.attraction;
    let seed = derive_seed(ctx.seed(), &[ATTRACTION_TAG]);
    let noise = ctx.two_sided_noise(s.dt, a.horizon, seed)?;
    let manifold = ctx.general_manifold(&noise)?;
    let y0 = manifold.full_shifted(&[s.x0], 0)?[0] + a.displacement;
    let grid = ctx.full_grid(a.horizon)?;
    let path = sample_wiener(grid, 1, seed)?;
    let tr = ex.simulate(s.x0, y0, &grid, &path)?;
    let series = attraction_distance(&tr, manifold.as_ref())?;
    let (file, mut w) = ctx.create("attraction.csv")?;
    write_attraction_csv(&series, &mut w)?;
    w.flush()?;
    Ok(Outcome::new("attraction", vec![file]))
}

pub fn diagnose_absorbing(ctx: &Context) -> Result<Outcome> {
    let ex = ctx.example()?;
    let s = &ctx.cfg.simulation;
    let grid = ctx.full_grid(s.horizon)?;
    let ensemble = (0..ctx.cfg.absorbing.paths)
        .map(|p| {
            let path = sample_wiener(grid, 1, derive_seed(ctx.seed(), &[ABSORBING_TAG, p as u64]))?;
            ex.simulate(s.x0, ctx.cfg.y0(), &grid, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = absorbing_diagnostic(&ex, &ensemble)?;
    let file = ctx.write_json("absorbing.json", &report)?;
    let mut out = Outcome::new("diagnose-absorbing", vec![file]);
    out.summary = serde_json::json!({ "violations": report.violations, "paths": report.paths });
    Ok(out)
}

pub fn relative(files: &mut [PathBuf], base: &Path) {
    for f in files {
        if let Ok(rel) = f.strip_prefix(base) {
            *f = rel.to_path_buf();
        }
    }
}
