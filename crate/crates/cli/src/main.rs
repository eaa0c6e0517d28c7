use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nbm::checks::Faults;
use nbm::InitMode;
use nbm_cli::commands::{self, SampleArgs};
use nbm_cli::{init_threads, CliError};

#[derive(Parser)]
#[command(name = "nbm", version, about = "Train and sample neural Boltzmann machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    LogcoshSign,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, e.g. `--set train.epochs=2`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Draw samples for the given labels into a PGM grid.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated labels; all classes when omitted.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<usize>>,
        #[arg(long, default_value_t = 4)]
        per_label: usize,
        #[arg(long, default_value_t = 32)]
        k: usize,
        /// Emit the conditional mean of the last visible update.
        #[arg(long)]
        mean: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Chain start: `draw` from the zero-field conditional or its `mean`.
        #[arg(long, default_value = "draw")]
        init_mode: InitMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render sample, bias, variance and mean coupling per label.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<usize>>,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Chain start: `draw` from the zero-field conditional or its `mean`.
        #[arg(long, default_value = "draw")]
        init_mode: InitMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical self-checks.
    Check {
        #[arg(long)]
        fast: bool,
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train { config, resume, sets } => {
            let s = commands::train(&config, resume.as_deref(), &sets, true)?;
            println!(
                "trained {} steps ({} epochs); outputs in {}",
                s.steps,
                s.epochs,
                s.output_dir.display()
            );
            Ok(())
        }
        Command::Sample {
            ckpt,
            labels,
            per_label,
            k,
            mean,
            seed,
            init_mode,
            out,
        } => {
            let args = SampleArgs {
                labels,
                per_label,
                k_steps: k,
                mean,
                seed,
                init_mode,
            };
            commands::sample(&ckpt, &args, &out)
        }
        Command::Inspect {
            ckpt,
            labels,
            k,
            seed,
            init_mode,
            out,
        } => {
            let args = SampleArgs {
                labels,
                per_label: 1,
                k_steps: k,
                mean: true,
                seed,
                init_mode,
            };
            commands::inspect(&ckpt, &args, &out)
        }
        Command::Check {
            fast,
            inject_fault,
            seed,
        } => {
            let faults = Faults {
                logcosh_sign: matches!(inject_fault, Some(Fault::LogcoshSign)),
            };
            commands::check(fast, faults, seed, &mut io::stdout())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nbm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
