use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod ablate;
mod commands;

/// Multi-scale multi-task dense prediction at desk scale.
#[derive(Parser, Debug)]
#[command(name = "mti", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a checkpoint and write per-task metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Identifier written in the model_id column.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Relative multi-task performance of one metrics file against another.
    Delta {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-task pixel affinity correspondence as a function of dilation.
    Affinity {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the scale/propagation ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Largest central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Coordinates sampled per parameter tensor in the end-to-end check.
        #[arg(long, default_value_t = 2)]
        coords_per_param: usize,
        /// Scales analytic convolution weight gradients by this factor.
        #[arg(long, hide = true)]
        fault: Option<f64>,
    },
}

fn exit_code(e: &mti_core::Error) -> u8 {
    match e {
        mti_core::Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    let result = match cli.command {
        Command::Synth { config, out_dir, count } => commands::synth(&config, &out_dir, count),
        Command::Train {
            config,
            data_dir,
            out,
            log,
        } => commands::train(&config, &data_dir, &out, &log),
        Command::Eval {
            checkpoint,
            data_dir,
            config,
            out,
            model_id,
        } => commands::eval(&checkpoint, &data_dir, &config, &out, model_id),
        Command::Delta { model, baseline, out } => commands::delta(&model, &baseline, &out),
        Command::Affinity { data_dir, config, out } => commands::affinity(&data_dir, &config, &out),
        Command::Ablate { config, data_dir, out } => ablate::run(&config, &data_dir, &out),
        Command::Gradcheck {
            config,
            eps,
            coords_per_param,
            fault,
        } => commands::gradcheck(&config, eps, coords_per_param, fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
