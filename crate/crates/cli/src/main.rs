//! `fibrae` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure. Verbosity follows `FIBRAE_LOG` (`error`, `info`, `debug`, ...).

mod metrics;
mod oracle_check;
mod train;
mod transport;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fibrae::data_io::RunConfig;
use fibrae::geodesic::{OptimizerKind, SolverConfig};

#[derive(Parser, Debug)]
#[command(name = "fibrae", version, about = "Fibered auto-encoders and geodesic transport between fibers")]
struct Cli {
    /// Worker threads for parallel work (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a fibered auto-encoder.
    Train(train::TrainArgs),
    /// Transport fiber points from one condition to another.
    Transport(transport::TransportArgs),
    /// Export the geodesic path of a single point.
    Trace(transport::TraceArgs),
    /// Decode frames along the geodesic of a single point.
    Interpolate(transport::InterpolateArgs),
    /// LISI and variance decomposition of a labeled point cloud.
    Metrics(metrics::MetricsArgs),
    /// Check the geodesic solver against ground-truth oracles.
    OracleCheck(oracle_check::OracleCheckArgs),
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<fibrae::Error> for Failure {
    fn from(e: fibrae::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Rmsprop,
    Adam,
    Sgd,
}

/// Geodesic solver settings: defaults, then a run config's `solver`
/// section, then explicit flags.
#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Run config whose `solver` section provides the base settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Basis depth N.
    #[arg(long)]
    depth: Option<u32>,
    /// Energy time step (a negative power of two).
    #[arg(long)]
    dt: Option<f64>,
    /// Weight of the endpoint regularizer towards naive transport.
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
}

impl SolverArgs {
    pub fn resolve(&self) -> Result<SolverConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?.solver,
            None => SolverConfig::default(),
        };
        if let Some(v) = self.depth {
            c.depth = v;
        }
        if let Some(v) = self.dt {
            c.dt = v;
        }
        if let Some(v) = self.lambda_reg {
            c.lambda_reg = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = self.tolerance {
            c.tolerance = v;
        }
        if let Some(v) = self.optimizer {
            c.optimizer = match v {
                OptimizerArg::Rmsprop => OptimizerKind::Rmsprop,
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::GradientDescent,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FIBRAE_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Transport(a) => transport::run_transport(a),
        Command::Trace(a) => transport::run_trace(a),
        Command::Interpolate(a) => transport::run_interpolate(a),
        Command::Metrics(a) => metrics::run(a),
        Command::OracleCheck(a) => oracle_check::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
