//! Run configuration: JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slowfast_core::estimate::{
    System, DEFAULT_DT_FULL, DEFAULT_DT_SLOW, DEFAULT_INIT_BOX, DEFAULT_PATHS, DEFAULT_SLOW_NOISE_SUBSTEPS, DEFAULT_X0,
};
use slowfast_core::model::STIFFNESS_RATIO;
use slowfast_core::reduced::NoiseFreezing;
use slowfast_core::Error;

pub const OUT_DIR_ENV: &str = "SLOWFAST_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub a_true: f64,
    pub epsilon: f64,
    pub sigma: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            a_true: 0.1,
            epsilon: 0.01,
            sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    /// Full-system step.
    pub dt: f64,
    /// Reduced-system step.
    pub dt_slow: f64,
    pub horizon: f64,
    pub x0: f64,
    /// Defaults to `x0²/600`.
    pub y0: Option<f64>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT_FULL,
            dt_slow: DEFAULT_DT_SLOW,
            horizon: 1.0,
            x0: DEFAULT_X0,
            y0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSection {
    /// Number of equispaced instants `I` on `(0, horizon]`.
    pub count: usize,
    /// Samples `J` per instant.
    pub samples: usize,
    /// Existing observation metadata file; generated from the model when
    /// absent.
    pub file: Option<PathBuf>,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self {
            count: 50,
            samples: 10,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub system: System,
    /// Monte-Carlo paths `M` per objective evaluation.
    pub paths: usize,
    pub init_box: (f64, f64),
    pub max_iter: usize,
    pub tol_x: f64,
    pub tol_f: f64,
    pub stall_window: usize,
    pub stall_tol: f64,
    pub max_restarts: usize,
    pub common_random_numbers: bool,
    pub noise_freezing: NoiseFreezing,
    pub slow_noise_substeps: usize,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            system: System::Full,
            paths: DEFAULT_PATHS,
            init_box: DEFAULT_INIT_BOX,
            max_iter: 200,
            tol_x: 1e-4,
            tol_f: 1e-6,
            stall_window: 20,
            stall_tol: 1e-12,
            max_restarts: 10,
            common_random_numbers: false,
            noise_freezing: NoiseFreezing::Frozen,
            slow_noise_substeps: DEFAULT_SLOW_NOISE_SUBSTEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub a_min: f64,
    pub a_max: f64,
    pub step: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            a_min: 0.02,
            a_max: 0.3,
            step: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSection {
    pub xi_min: f64,
    pub xi_max: f64,
    pub points: usize,
    /// Use the example's closed form instead of the general solver.
    pub closed_form: bool,
}

impl Default for ManifoldSection {
    fn default() -> Self {
        Self {
            xi_min: -10.0,
            xi_max: 10.0,
            points: 201,
            closed_form: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttractionSection {
    /// Offset of `y0` from the manifold at `x0`.
    pub displacement: f64,
    pub horizon: f64,
}

impl Default for AttractionSection {
    fn default() -> Self {
        Self {
            displacement: 1.0,
            horizon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbsorbingSection {
    pub paths: usize,
}

impl Default for AbsorbingSection {
    fn default() -> Self {
        Self { paths: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub master: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub simulation: SimulationSection,
    pub observations: ObservationSection,
    pub estimation: EstimationSection,
    pub grid: GridSection,
    pub manifold: ManifoldSection,
    pub attraction: AttractionSection,
    pub absorbing: AbsorbingSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

fn positive(path: &str, v: f64) -> Result<(), Error> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<(), Error> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be non-negative and finite, got {v}")))
    }
}

fn at_least_one(path: &str, v: usize) -> Result<(), Error> {
    if v >= 1 {
        Ok(())
    } else {
        Err(invalid(path, "must be at least 1"))
    }
}

impl RunConfig {
    /// Parses JSON text, reporting the field path and position of errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, Error> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!("{origin}: {path}: {inner}"))
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Checks every numeric constraint of the downstream modules.
    pub fn validate(&self) -> Result<(), Error> {
        let m = &self.model;
        positive("model.a_true", m.a_true)?;
        positive("model.epsilon", m.epsilon)?;
        non_negative("model.sigma", m.sigma)?;

        let s = &self.simulation;
        positive("simulation.dt", s.dt)?;
        positive("simulation.dt_slow", s.dt_slow)?;
        positive("simulation.horizon", s.horizon)?;
        if !s.x0.is_finite() || s.y0.is_some_and(|y| !y.is_finite()) {
            return Err(invalid("simulation.x0", "initial condition must be finite"));
        }
        let guard = STIFFNESS_RATIO * m.epsilon;
        if s.dt > guard * (1.0 + 1e-12) {
            return Err(invalid(
                "simulation.dt",
                format!("{} exceeds the stiffness guard epsilon/50 = {guard}", s.dt),
            ));
        }
        if s.dt_slow > 0.01 * (1.0 + 1e-12) {
            return Err(invalid("simulation.dt_slow", format!("{} exceeds 0.01", s.dt_slow)));
        }

        let o = &self.observations;
        at_least_one("observations.count", o.count)?;
        at_least_one("observations.samples", o.samples)?;

        let e = &self.estimation;
        at_least_one("estimation.paths", e.paths)?;
        at_least_one("estimation.max_iter", e.max_iter)?;
        at_least_one("estimation.stall_window", e.stall_window)?;
        at_least_one("estimation.slow_noise_substeps", e.slow_noise_substeps)?;
        non_negative("estimation.tol_x", e.tol_x)?;
        non_negative("estimation.tol_f", e.tol_f)?;
        if !e.stall_tol.is_finite() {
            return Err(invalid("estimation.stall_tol", "must be finite"));
        }
        let (lo, hi) = e.init_box;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(invalid("estimation.init_box", format!("need 0 < lo < hi, got [{lo}, {hi}]")));
        }

        let g = &self.grid;
        positive("grid.step", g.step)?;
        if !(g.a_max >= g.a_min) || !g.a_min.is_finite() || !g.a_max.is_finite() {
            return Err(invalid("grid.a_max", "must be at least grid.a_min"));
        }

        let mf = &self.manifold;
        if !(mf.xi_max > mf.xi_min) || !mf.xi_min.is_finite() || !mf.xi_max.is_finite() {
            return Err(invalid("manifold.xi_max", "must exceed manifold.xi_min"));
        }
        if mf.points < 2 {
            return Err(invalid("manifold.points", "must be at least 2"));
        }

        non_negative("attraction.displacement", self.attraction.displacement)?;
        positive("attraction.horizon", self.attraction.horizon)?;
        at_least_one("absorbing.paths", self.absorbing.paths)?;
        Ok(())
    }

    pub fn y0(&self) -> f64 {
        self.simulation
            .y0
            .unwrap_or_else(|| slowfast_core::estimate::default_y0(self.simulation.x0))
    }

    /// `--out-dir`, then `output.dir`, then the environment, then `out`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output.dir {
            return p.clone();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("out"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"a_true": 1.0}}"#, "t").unwrap();
        assert_eq!(cfg.model.a_true, 1.0);
        assert_eq!(cfg.model.epsilon, 0.01);
        assert_eq!(cfg.model.sigma, 0.01);
        assert_eq!(cfg.estimation.paths, 30);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_json("{\"model\": {\n \"a_tru\": 1.0}}", "t").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.a_tru"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn zero_epsilon_rejected() {
        let cfg = RunConfig::from_json(r#"{"model": {"epsilon": 0.0}}"#, "t").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("model.epsilon"), "{msg}");
    }

    #[test]
    fn stiff_step_rejected() {
        let cfg = RunConfig::from_json(r#"{"simulation": {"dt": 0.001}}"#, "t").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("stiffness guard"), "{msg}");
        let ok = RunConfig::from_json(r#"{"model": {"epsilon": 0.1}, "simulation": {"dt": 0.001}}"#, "t").unwrap();
        ok.validate().unwrap();
    }

    #[test]
    fn out_dir_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.out_dir(Some(Path::new("a"))), PathBuf::from("a"));
        cfg.output.dir = Some("b".into());
        assert_eq!(cfg.out_dir(None), PathBuf::from("b"));
    }
}
