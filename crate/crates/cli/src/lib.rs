//! Command-line front end: each subcommand reads a run config and writes
//! one self-describing run directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod rundir;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{CliConfig, Paths};
pub use error::CliError;
pub use rundir::{read_manifest, Manifest, RunDir, MANIFEST};

#[derive(Parser, Debug)]
#[command(name = "saetune", version, about = "Sparse-autoencoder-guided adapter tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: runs/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the base model and fine-tune the source model.
    TrainBase(RunArgs),
    /// Train an SAE on source activations over the trigger set.
    TrainSae(RunArgs),
    /// Splice an SAE into the target and tune adapters against KL.
    SaeTune(RunArgs),
    /// Count reasoning features at every probed layer.
    ProbeFeatures(RunArgs),
    /// Fit mixtures to feature and score layer distributions.
    FitGmm(RunArgs),
    /// Exact-match evaluation of a model checkpoint, optionally with adapters.
    Evaluate(RunArgs),
    /// Compare base, source, SAE-tuned and plain-SFT arms.
    AblateAlgorithm(RunArgs),
    /// Tune with the SAE at every probed layer.
    AblateLayers(RunArgs),
    /// Adapter transfer across models and tasks.
    Transfer(RunArgs),
    /// Merge finished run directories into summary tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Run directories to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainBase(_) => "train-base",
            Command::TrainSae(_) => "train-sae",
            Command::SaeTune(_) => "sae-tune",
            Command::ProbeFeatures(_) => "probe-features",
            Command::FitGmm(_) => "fit-gmm",
            Command::Evaluate(_) => "evaluate",
            Command::AblateAlgorithm(_) => "ablate-algorithm",
            Command::AblateLayers(_) => "ablate-layers",
            Command::Transfer(_) => "transfer",
            Command::Report { .. } => "report",
        }
    }
}

/// Run one subcommand from already-split arguments.
pub fn execute(cmd: &str, config: &Path, out: &Path) -> Result<Manifest, CliError> {
    let cfg = CliConfig::load(config)?;
    commands::run_command(cmd, cfg, config, out)
}

fn dispatch(cli: Cli) -> Result<Manifest, CliError> {
    let name = cli.command.name();
    match cli.command {
        Command::Report { out, runs } => report::report(&runs, &out),
        Command::TrainBase(a)
        | Command::TrainSae(a)
        | Command::SaeTune(a)
        | Command::ProbeFeatures(a)
        | Command::FitGmm(a)
        | Command::Evaluate(a)
        | Command::AblateAlgorithm(a)
        | Command::AblateLayers(a)
        | Command::Transfer(a) => {
            let out = a.out.unwrap_or_else(|| Path::new("runs").join(name));
            execute(name, &a.config, &out)
        }
    }
}

/// Parse `argv` (program name first), run, and return the exit status.
/// Failures print a single `saetune: error[<kind>]: <message>` line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let msg = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("saetune: error[usage]: {msg}");
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(m) => {
            println!("{}: wrote {} outputs", m.command, m.outputs.len());
            0
        }
        Err(e) => {
            eprintln!("saetune: error[{}]: {}", e.kind, e.message);
            e.exit_code()
        }
    }
}
