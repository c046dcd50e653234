use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relcorr::commands::{self, report_csv, sweep_csv};
use relcorr::config::RunConfig;
use relcorr::train::train_command;
use relcorr::{CliError, Result};

/// Few-shot classification with self- and cross-correlational relation modules.
#[derive(Parser)]
#[command(name = "relcorr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, checkpointing every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint or run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on seeded episodes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention maps of one sampled episode.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic texture dataset.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let last = train_command(&cfg, resume.as_deref())?;
            eprintln!("checkpoint {}", last.display());
        }
        Command::Eval { config, ckpt, episodes, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let report = commands::eval_command(&cfg, &ckpt, episodes, seed)?;
            emit(&report_csv(&report), out.as_deref())?;
            eprintln!("accuracy {:.4} +- {:.4} over {} episodes", report.mean, report.ci95, report.episodes);
        }
        Command::Sweep { config, key, values, out } => {
            let cfg = RunConfig::load(&config)?;
            let rows = commands::sweep_command(&cfg, &key, &values)?;
            emit(&sweep_csv(&rows), out.as_deref())?;
        }
        Command::ExportAttn { ckpt, out, seed } => {
            let m = commands::export_attention(&ckpt, &out, seed)?;
            eprintln!("exported {} pairs to {}", m.pairs.len(), out.display());
        }
        Command::GenData { classes, per_class, size, seed, out } => {
            let m = commands::gen_data_command(&out, classes, per_class, size, seed)?;
            eprintln!("wrote {} images to {}", m.file_count(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
