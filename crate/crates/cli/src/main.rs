//! `stainkit` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{config_err, CliResult, FileConfig};

#[derive(Debug, Parser)]
#[command(name = "stainkit", version, about = "Stain normalization for H&E histology images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file whose keys mirror the long flags; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step (Vahadane pixel sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core. Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize one PNG or a directory tree of PNGs.
    Normalize(commands::NormalizeArgs),
    /// SSIM report between two directories of matching PNGs.
    Evaluate(commands::EvaluateArgs),
    /// Cut an image into grid patches on disk.
    Extract(commands::ExtractArgs),
    /// Reassemble patches written by `extract`.
    Stitch(commands::StitchArgs),
    /// Run the generator on a single PNG.
    Infer(commands::InferArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = config::pick(common.seed, file.seed).unwrap_or(0);
    let workers = config::pick(common.workers, file.workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err(format!("--workers {workers}: {e}")))?;
    pool.install(|| match cli.command {
        Command::Normalize(a) => commands::normalize(a, &file, seed),
        Command::Evaluate(a) => commands::evaluate(a, &file),
        Command::Extract(a) => commands::extract(a, &file),
        Command::Stitch(a) => commands::stitch(a, &file),
        Command::Infer(a) => commands::infer(a, &file),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stainkit: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
