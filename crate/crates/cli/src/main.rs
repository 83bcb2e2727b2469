mod commands;
mod error;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use srpn_core::gradcheck::Scope;

#[derive(Parser, Debug)]
#[command(name = "srpn", version, about = "Similarity-based region proposal experiments")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolArg {
    F1ap,
    Ringcell,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Losses,
    Model,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Ops => Scope::Ops,
            ScopeArg::Losses => Scope::Losses,
            ScopeArg::Model => Scope::Model,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, eval and negative-only datasets.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed` and `train.model_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory, or a `synth` output holding `train/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, or a `synth` output holding `eval/` (and `negative/`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "f1ap")]
        protocol: ProtocolArg,
        /// Defaults to the `config.toml` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(value_enum)]
        scope: ScopeArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the table to `<out>/gradcheck.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint on one image; writes detections and an overlay.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Margin sweep over pair and triplet losses.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1.0,1.5,2.0")]
        margins: Vec<f64>,
        /// Uses the generated datasets of the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth { config, seed, out } => commands::synth(config.as_deref(), seed, &out),
        Command::Train { config, seed, data, out } => commands::train(config.as_deref(), seed, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            protocol,
            config,
            out,
        } => commands::eval(&checkpoint, &data, protocol, config.as_deref(), &out),
        Command::Gradcheck { scope, seed, out } => commands::gradcheck(scope.into(), seed, out.as_deref()),
        Command::Detect {
            checkpoint,
            image,
            config,
            out,
        } => commands::detect(&checkpoint, &image, config.as_deref(), &out),
        Command::Ablate {
            config,
            margins,
            data,
            seed,
            out,
        } => commands::ablate(config.as_deref(), &margins, data.as_deref(), seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
