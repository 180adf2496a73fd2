mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] hwlab::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 config, 3 data, 4 numerical blow-up, 1 anything else.
    fn exit_code(&self) -> u8 {
        use hwlab::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Data(_) | CliError::Core(E::Data(_) | E::Checksum { .. } | E::MissingInput { .. }) => 3,
            CliError::Core(E::BlowUp { .. } | E::NonFiniteLoss { .. } | E::InversionDiverged { .. }) => 4,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hwlab", version, about = "Hasegawa-Wakatani simulation and FI-Conv surrogate toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML config file; omitted keys take reference values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed; every random stream is derived from it by name.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run HW simulations; writes trajectories and QoI series.
    Simulate(RunArgs),
    /// Split instances and extract snapshot pairs.
    Dataset(RunArgs),
    /// Train FI-Conv on a pair file.
    Train(RunArgs),
    /// Score a checkpoint against the persistence baseline.
    Eval(RunArgs),
    /// Autoregressive prediction from a simulated snapshot.
    Rollout(RunArgs),
    /// QoI statistics, temporal spectra and |grad phi|^2 spectra of a trajectory.
    Diagnose(RunArgs),
    /// Estimate c1, k0, kappa, c_pb with frozen weights.
    Invert(RunArgs),
    /// Write the reference config with every key and its default.
    ReferenceConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands::*;
    match cli.command {
        Command::Simulate(a) => with_config("simulate", &a, simulate),
        Command::Dataset(a) => with_config("dataset", &a, dataset),
        Command::Train(a) => with_config("train", &a, train),
        Command::Eval(a) => with_config("eval", &a, eval),
        Command::Rollout(a) => with_config("rollout", &a, rollout),
        Command::Diagnose(a) => with_config("diagnose", &a, diagnose),
        Command::Invert(a) => with_config("invert", &a, invert),
        Command::ReferenceConfig { out } => match out {
            Some(dir) => {
                std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
                let path = dir.join("reference.toml");
                std::fs::write(&path, config::REFERENCE_CONFIG).map_err(CliError::io(&path))
            }
            None => {
                print!("{}", config::REFERENCE_CONFIG);
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hwlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
