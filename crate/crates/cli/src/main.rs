mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Height-sliced voxel occupancy experiments on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "voxslice", version, arg_required_else_help = true)]
struct Cli {
    /// Print the default experiment configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic samples and write them as tensor and label files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and write its checkpoint, loss trace and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the first entry of `train.seeds`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a generated data directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant of an ablation suite for each configured seed.
    Ablate {
        /// slices, strategy, attention or fusion.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Restrict to one module: ops, attention, vsf, losses or pipeline.
        #[arg(long)]
        module: Option<String>,
        /// Distort one analytic gradient entry per case (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.print_defaults {
        commands::print_defaults()
    } else {
        match cli.command {
            Some(Command::GenData { config, out, count, seed }) => {
                commands::gen_data(config.as_deref(), out, count, seed)
            }
            Some(Command::Train { config, out, seed }) => commands::train(config.as_deref(), out, seed),
            Some(Command::Eval { checkpoint, data, out }) => commands::eval(&checkpoint, &data, out),
            Some(Command::Ablate { suite, config, out, jobs }) => {
                commands::ablate(&suite, config.as_deref(), out, jobs)
            }
            Some(Command::Gradcheck { module, corrupt }) => commands::gradcheck(module.as_deref(), corrupt),
            None => Err(commands::usage("no command given (see --help)")),
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
