use clap::{Args, Parser, Subcommand};
use rbm_pb::experiment::{load_config, preset, run_experiment, ExperimentConfig, Pipeline};
use rbm_pb::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Random Batch particle simulations and finite-difference reference
/// solutions of the Poisson-Boltzmann equation.
#[derive(Debug, Parser)]
#[command(name = "rbmpb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Particle simulation with prescribed positive charge; time-averaged densities and potential.
    Simulate(RunArgs),
    /// Finite-difference solution of the reduced boundary value problem.
    FdSolve(RunArgs),
    /// Iterate the positive charge until the wall densities match the far-field concentration.
    IterateQ(RunArgs),
    /// Differential capacitance over the free-charge grid at fixed far-field concentration.
    Capacitance(RunArgs),
    /// Weak Monte Carlo error of test-function moments against the reference.
    Convergence(RunArgs),
    /// Error of truncated reference solutions against a large-domain one.
    TruncationStudy(RunArgs),
    /// Planar kernel density estimates and angular densities of a 3D run.
    KdePlanes(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn split(self) -> (Pipeline, RunArgs) {
        match self {
            Command::Simulate(a) => (Pipeline::Simulate, a),
            Command::FdSolve(a) => (Pipeline::FdSolve, a),
            Command::IterateQ(a) => (Pipeline::IterateQ, a),
            Command::Capacitance(a) => (Pipeline::Capacitance, a),
            Command::Convergence(a) => (Pipeline::Convergence, a),
            Command::TruncationStudy(a) => (Pipeline::TruncationStudy, a),
            Command::KdePlanes(a) => (Pipeline::KdePlanes, a),
        }
    }
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(Error::Config("one of --config or --preset is required".into())),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(pipeline: Pipeline, args: RunArgs) -> Result<Vec<PathBuf>, Error> {
    let cfg = resolve(&args)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Error::Config("`--threads`: must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_experiment(pipeline, &cfg, &args.out))
}

fn main() -> ExitCode {
    let (pipeline, args) = Cli::parse().command.split();
    match run(pipeline, args) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("rbmpb {}: {e}", pipeline.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
