//! `bayes-mpc`: run closed-loop experiments, sample posteriors and solve
//! single horizon problems from a JSON experiment description.

mod draws;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bayes_mpc::bayes::SampleSet;
use bayes_mpc::closed_loop::{horizon_snapshot, identify};
use bayes_mpc::config::ExperimentConfig;
use bayes_mpc::smpc::control_action;
use bayes_mpc::{run_closed_loop, SolveStatus};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::draws::DrawsLayout;
use crate::error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "bayes-mpc", version, about)]
struct Cli {
    /// Worker threads for sampling and scenario evaluation.
    #[arg(long, global = true, env = "BAYES_MPC_THREADS")]
    threads: Option<usize>,
    /// Log progress to standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the closed loop and write trajectory, horizon and diagnostics files.
    Run(Common),
    /// Simulate `t` steps under random excitation and sample the posterior once.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of data points.
        #[arg(long)]
        t: usize,
    },
    /// Solve one horizon problem from a draws file written by `sample`.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Draws file.
        #[arg(long)]
        samples: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn draws_layout(cfg: &ExperimentConfig) -> DrawsLayout {
    let model = cfg.model.build();
    let dims = model.dims();
    DrawsLayout {
        param_names: model.param_names().iter().map(|s| s.to_string()).collect(),
        n_x: dims.n_x,
        n_u: dims.n_u,
        n_w: dims.n_w(),
        horizon: cfg.control.horizon,
    }
}

#[derive(Serialize)]
struct RunDiagnostics<'a> {
    name: &'a str,
    seed: u64,
    param_names: &'a [String],
    steps: &'a [bayes_mpc::closed_loop::StepDiagnostics],
}

fn cmd_run(common: &Common) -> Result<u8, CliError> {
    let cfg = load(common)?;
    let run = run_closed_loop(&cfg, |r| {
        log::info!("step {}/{} done", r.t, cfg.steps);
    })?;
    create_dir(&common.out)?;
    output::trajectory(&run, &common.out.join("trajectory.csv"))?;
    for snapshot in &run.snapshots {
        output::horizon(snapshot, &output::horizon_path(&common.out, snapshot.t))?;
    }
    output::json(
        &RunDiagnostics { name: &cfg.name, seed: cfg.seed, param_names: &run.param_names, steps: &run.diagnostics },
        &common.out.join("diagnostics.json"),
    )?;
    let failed: Vec<usize> = run.records.iter().filter(|r| r.solver_status != SolveStatus::Converged).map(|r| r.t).collect();
    if failed.is_empty() {
        Ok(exit::OK)
    } else {
        eprintln!("solver did not converge at steps {failed:?}");
        Ok(exit::NOT_CONVERGED)
    }
}

#[derive(Serialize)]
struct SampleDiagnostics<'a> {
    name: &'a str,
    seed: u64,
    t: usize,
    sampling_seconds: f64,
    #[serde(flatten)]
    diagnostics: &'a bayes_mpc::Diagnostics,
}

fn cmd_sample(common: &Common, t: usize) -> Result<u8, CliError> {
    let cfg = load(common)?;
    if t == 0 {
        return Err(CliError::Config(bayes_mpc::ConfigError::Invalid("--t must be at least 1".into())));
    }
    let started = Instant::now();
    let (data, samples): (_, SampleSet) = identify(&cfg, t)?;
    let sampling_seconds = started.elapsed().as_secs_f64();
    create_dir(&common.out)?;
    draws::write(&draws_layout(&cfg), &samples, t, &data.inputs[t - 1], &common.out.join("draws.csv"))?;
    output::json(
        &SampleDiagnostics { name: &cfg.name, seed: cfg.seed, t, sampling_seconds, diagnostics: &samples.diagnostics },
        &common.out.join("diagnostics.json"),
    )?;
    if samples.diagnostics.has_warnings() {
        for w in &samples.diagnostics.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(exit::OK)
}

#[derive(Serialize)]
struct Plan<'a> {
    t: usize,
    status: SolveStatus,
    iterations: usize,
    inputs: &'a [Vec<f64>],
    slack: f64,
    chance: &'a [f64],
    mu: f64,
    gamma: f64,
}

fn cmd_plan(common: &Common, samples: &Path) -> Result<u8, CliError> {
    let cfg = load(common)?;
    let draws = draws::read(&draws_layout(&cfg), samples)?;
    let model = cfg.model.build();
    let decision = control_action(model.as_ref(), &draws.scenarios, &draws.applied, &cfg.control, &cfg.continuation, None)?;
    let snapshot = horizon_snapshot(draws.t, model.as_ref(), &draws.scenarios, &draws.applied, &decision)?;
    create_dir(&common.out)?;
    output::solver_trace(&decision.trace, &common.out.join("solver_trace.csv"))?;
    output::horizon(&snapshot, &output::horizon_path(&common.out, draws.t))?;
    output::json(
        &Plan {
            t: draws.t,
            status: decision.status,
            iterations: decision.iterations,
            inputs: &decision.inputs,
            slack: decision.slack,
            chance: &decision.chance,
            mu: decision.mu,
            gamma: decision.gamma,
        },
        &common.out.join("plan.json"),
    )?;
    if decision.converged() {
        Ok(exit::OK)
    } else {
        eprintln!("solver finished with status {:?}", decision.status);
        Ok(exit::NOT_CONVERGED)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Run(common) => cmd_run(common),
        Command::Sample { common, t } => cmd_sample(common, *t),
        Command::Plan { common, samples } => cmd_plan(common, samples),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
