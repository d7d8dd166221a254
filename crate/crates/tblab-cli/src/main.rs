//! `tblab`: reproducible tight-binding locality experiments.
//!
//! Reads a TOML config describing one experiment family, runs it, and writes
//! plot-ready CSVs plus fit-summary and reproduction-manifest JSON. Identical
//! (config, seed, version) always produce identical bytes.

mod config;
mod error;
mod output;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{probe_solver, Config, Kind};
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "tblab",
    version,
    about = "Tight-binding locality experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment declared by the config's `kind`.
    Run(RunArgs),
    /// Check a config, including gap-solver feasibility, writing nothing.
    Validate {
        /// Path to the TOML config file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Band structure of the config's [model] section.
    Bands(RunArgs),
    /// Direct and indirect gaps of the config's [model] section.
    Gaps(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML config file.
    #[arg(long)]
    config: PathBuf,

    /// Output directory; overrides TBLAB_OUT and the config `out` key.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Seed override for randomized draws.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for sweep entries (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => execute(args, None),
        Command::Bands(args) => execute(args, Some(Kind::Bands)),
        Command::Gaps(args) => execute(args, Some(Kind::Gaps)),
        Command::Validate { config } => validate(&config),
    }
}

fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Config::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn issues_error(issues: Vec<String>) -> CliError {
    CliError::Config(format!(
        "{} issue(s):\n  - {}",
        issues.len(),
        issues.join("\n  - ")
    ))
}

fn execute(args: RunArgs, forced: Option<Kind>) -> Result<()> {
    let cfg = load(&args.config)?;
    let plan = cfg.resolve(forced).map_err(issues_error)?;
    let out = resolve_out(&args, &cfg)?;
    let seed = args.seed.unwrap_or_else(|| cfg.seed());
    let files = run::execute(&plan, seed, args.jobs)?;
    output::write_all(&out, &files)?;
    println!(
        "{}: wrote {} file(s) to {}",
        plan.kind().label(),
        files.len(),
        out.display()
    );
    Ok(())
}

/// Output directory precedence: `--out`, then `TBLAB_OUT`, then the config.
fn resolve_out(args: &RunArgs, cfg: &Config) -> Result<PathBuf> {
    args.out
        .clone()
        .or_else(|| std::env::var_os("TBLAB_OUT").map(PathBuf::from))
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| {
            CliError::Config(
                "no output directory: pass --out, set TBLAB_OUT, or set `out` in the config".into(),
            )
        })
}

fn validate(path: &Path) -> Result<()> {
    let cfg = load(path)?;
    let plan = cfg.resolve(None).map_err(issues_error)?;
    let issues = probe_solver(&plan);
    if !issues.is_empty() {
        return Err(issues_error(issues));
    }
    println!(
        "configuration ok: kind {}, {} solvable gap pair(s), no issues",
        plan.kind().label(),
        plan.gap_pairs().len()
    );
    Ok(())
}
