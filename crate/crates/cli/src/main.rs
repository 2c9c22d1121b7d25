//! `slowfast`: experiments for parameter estimation of slow-fast stochastic
//! systems on the random slow manifold.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slowfast_core::estimate::System;
use slowfast_core::Error;

use crate::commands::Context;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "slowfast", version, about = "Slow-fast SDE simulation and parameter estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// System to simulate or estimate on.
    #[arg(long, global = true, value_enum)]
    system: Option<SystemArg>,

    #[arg(long = "a-true", visible_alias = "a", global = true)]
    a_true: Option<f64>,

    #[arg(long, global = true)]
    epsilon: Option<f64>,

    #[arg(long, global = true)]
    sigma: Option<f64>,

    /// Output directory (default: config, then $SLOWFAST_OUT_DIR, then `out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Add manifold values as `y` columns to reduced trajectories.
    #[arg(long, global = true)]
    emit_manifold: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SystemArg {
    Full,
    Slow,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the full system and write observation files.
    GenerateObs,
    /// Write one trajectory of the full or the reduced system.
    Simulate,
    /// Sample the approximate slow manifold over a range of slow states.
    ManifoldEval,
    /// Evaluate the objective over a parameter grid.
    ObjectiveGrid,
    /// Estimate the parameter with the stochastic Nelder-Mead search.
    Estimate,
    /// Distance of a displaced full-system orbit to the manifold.
    Attraction,
    /// Check the mean-square absorbing bound over an ensemble.
    DiagnoseAbsorbing,
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds.master = s;
    }
    if let Some(s) = cli.system {
        cfg.estimation.system = match s {
            SystemArg::Full => System::Full,
            SystemArg::Slow => System::Slow,
        };
    }
    if let Some(a) = cli.a_true {
        cfg.model.a_true = a;
    }
    if let Some(e) = cli.epsilon {
        cfg.model.epsilon = e;
    }
    if let Some(s) = cli.sigma {
        cfg.model.sigma = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<commands::Outcome, Error> {
    let cfg = build_config(&cli)?;
    let out_dir = cfg.out_dir(cli.out_dir.as_deref());
    let ctx = Context {
        cfg,
        out_dir,
        emit_manifold: cli.emit_manifold,
    };
    let mut outcome = match cli.command {
        Command::GenerateObs => commands::generate_obs(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::ManifoldEval => commands::manifold_eval(&ctx),
        Command::ObjectiveGrid => commands::objective_grid_cmd(&ctx),
        Command::Estimate => commands::estimate(&ctx),
        Command::Attraction => commands::attraction(&ctx),
        Command::DiagnoseAbsorbing => commands::diagnose_absorbing(&ctx),
    }?;
    commands::relative(&mut outcome.files, &ctx.out_dir);
    Ok(outcome)
}

fn report(err: &Error) -> ExitCode {
    let body = serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    });
    eprintln!("{body}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&Error::Config(e.to_string().trim_end().to_string())),
    };
    match run(cli) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => report(&err),
    }
}
