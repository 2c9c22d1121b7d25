use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid input configuration (grid, tolerances, shapes, option values).
    #[error("configuration error: {0}")]
    Config(String),

    /// Request outside the support of the data it refers to.
    #[error("domain error: {0}")]
    Domain(String),

    /// A structural hypothesis on the linear parts does not hold.
    #[error("hypothesis {hypothesis} violated: {detail}")]
    Hypothesis {
        hypothesis: &'static str,
        detail: String,
    },

    #[error("step size dt = {dt} exceeds stiffness guard eps/50; use dt <= {suggested}")]
    Stiffness { dt: f64, suggested: f64 },

    #[error("simulation diverged at step {step} (t = {t}): {detail}")]
    Divergence { step: usize, t: f64, detail: String },

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Hypothesis { .. } | Error::Stiffness { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::Convergence(_) => 4,
            Error::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Hypothesis { .. } => "hypothesis",
            Error::Stiffness { .. } => "stiffness",
            Error::Divergence { .. } => "divergence",
            Error::Convergence(_) => "convergence",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
