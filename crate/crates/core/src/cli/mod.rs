//! Command-line front end: configs, presets, sweeps and their output files.

pub mod config;
pub mod output;
pub mod presets;
pub mod sweep;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use presets::{preset, PRESET_NAMES};
pub use sweep::{run_grid, run_job, run_sweep, CellStatus, CellSummary, SeedRow, SweepResult};

use crate::selfcheck::selfcheck;

#[derive(Debug, Parser)]
#[command(name = "cocoa-continual", about = "Continual learning with the CoCoA distributed solver")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sweep described by a TOML config.
    Run { config: PathBuf },
    /// Same as `run`.
    Sweep { config: PathBuf },
    /// Run a named preset.
    Preset {
        name: String,
        /// Output directory (default: results/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seeds (default: the preset's 20).
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Run the built-in equivalence and property checks.
    Selfcheck,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_SELFCHECK: i32 = 2;

fn sweep_and_report(cfg: &ExperimentConfig) -> i32 {
    match run_sweep(cfg) {
        Ok(res) => {
            let skipped = res.cells.iter().filter(|c| c.status == CellStatus::Skipped).count();
            let diverged = res.cells.iter().filter(|c| c.status == CellStatus::Diverged).count();
            println!(
                "{} cells ({} skipped, {} with divergent seeds), {} files in {}",
                res.cells.len(),
                skipped,
                diverged,
                res.files.len(),
                cfg.out.display()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: {e}");
        }
    }
    match cli.command {
        Command::Run { config } | Command::Sweep { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => sweep_and_report(&cfg),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_ERROR
            }
        },
        Command::Preset { name, out, seeds } => {
            let Some(mut cfg) = preset(&name) else {
                eprintln!("error: unknown preset `{name}` (known: {})", PRESET_NAMES.join(", "));
                return EXIT_ERROR;
            };
            if let Some(out) = out {
                cfg.out = out;
            }
            if let Some(n) = seeds {
                cfg.seeds = config::Seeds::Count(n);
            }
            if let Err(e) = cfg.validate() {
                eprintln!("error: {e}");
                return EXIT_ERROR;
            }
            sweep_and_report(&cfg)
        }
        Command::Selfcheck => {
            let report = selfcheck();
            println!("{report}");
            if report.passed() {
                EXIT_OK
            } else {
                EXIT_SELFCHECK
            }
        }
    }
}
