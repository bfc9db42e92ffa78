use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::{CompareSettings, SweepSettings, TrainSettings, Values};
use error::CliError;

/// Fault-tolerance workbench: train models, inject stuck-at-0 faults, compare methods.
#[derive(Parser)]
#[command(name = "ftnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// INI file with shared keys and per-subcommand sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fault sweeps (0 = all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Override any config key, e.g. `--set lr_cls=0.05`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, log and metrics
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Stratified training subset size (0 = full set)
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        test_subset: Option<usize>,
        #[arg(long)]
        epochs_phase1: Option<usize>,
        #[arg(long)]
        epochs_phase2: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Accuracy under stuck-at-0 faults over a range of fractions
    Sweep {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// weight, node or filter (comma-separated for several)
        #[arg(long)]
        fault: Option<String>,
        /// `start:stop:step` or a comma-separated list
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        test_subset: Option<usize>,
        /// Let node faults reach the output layer
        #[arg(long)]
        include_output: bool,
    },
    /// Merge metrics files into one comparison table
    Compare {
        #[command(flatten)]
        shared: Shared,
        /// Metrics CSV files
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
}

fn overrides(section: &str, shared: &Shared, extra: Vec<(&str, Option<String>)>) -> Result<Values, CliError> {
    let mut v = Values::load(shared.config.as_deref(), section)?;
    let mut pairs: Vec<(&str, Option<String>)> = vec![
        ("out", shared.out.as_ref().map(|p| p.display().to_string())),
        ("seed", shared.seed.map(|s| s.to_string())),
        ("jobs", shared.jobs.map(|j| j.to_string())),
    ];
    pairs.extend(extra);
    for (k, val) in pairs {
        if let Some(val) = val {
            v.set(section, k, val)?;
        }
    }
    v.set_pairs(section, &shared.set)?;
    Ok(v)
}

fn s<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|x| x.to_string())
}

fn path(v: Option<PathBuf>) -> Option<String> {
    v.map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            shared,
            arch,
            method,
            data_dir,
            subset,
            test_subset,
            epochs_phase1,
            epochs_phase2,
            lambda,
        } => {
            let v = overrides(
                "train",
                &shared,
                vec![
                    ("arch", arch),
                    ("method", method),
                    ("data_dir", path(data_dir)),
                    ("subset", s(subset)),
                    ("test_subset", s(test_subset)),
                    ("epochs_phase1", s(epochs_phase1)),
                    ("epochs_phase2", s(epochs_phase2)),
                    ("lambda", s(lambda)),
                ],
            )?;
            commands::train(&TrainSettings::from_values(&v)?)?;
        }
        Command::Sweep {
            shared,
            checkpoint,
            fault,
            fractions,
            trials,
            data_dir,
            test_subset,
            include_output,
        } => {
            let v = overrides(
                "sweep",
                &shared,
                vec![
                    ("checkpoint", path(checkpoint)),
                    ("fault", fault),
                    ("fractions", fractions),
                    ("trials", s(trials)),
                    ("data_dir", path(data_dir)),
                    ("test_subset", s(test_subset)),
                    ("include_output", include_output.then(|| "true".to_string())),
                ],
            )?;
            commands::sweep(&SweepSettings::from_values(&v)?)?;
        }
        Command::Compare { shared, inputs } => {
            let joined = (!inputs.is_empty()).then(|| {
                inputs
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            });
            let v = overrides("compare", &shared, vec![("inputs", joined)])?;
            commands::compare(&CompareSettings::from_values(&v)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ftnn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
