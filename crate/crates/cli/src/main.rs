//! `lelab`: command-line runner for ground states, Green's functions,
//! branch sweeps and verification suites.

mod commands;
mod config;
mod pipeline;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{GreenArgs, GroundArgs, SolveArgs, SweepArgs};
use run::{EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "lelab",
    version,
    about = "Numerical laboratory for the nearly critical Lane-Emden system"
)]
struct Cli {
    /// Root directory of run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON configuration; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground state of the limit system on ℝ^N.
    Ground(GroundArgs),
    /// One solution at fixed ε on a ball or the unit cube.
    Solve(SolveArgs),
    /// Continuation along a decreasing ε schedule with rate fit.
    Sweep(SweepArgs),
    /// Green's, Robin and iterated Green's functions at a source point.
    Green(GreenArgs),
    /// Pinned verification suite: identities, rates, profiles or all.
    Verify { suite: String },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
        {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    let cfg = cli.config.as_deref();
    let result = match &cli.command {
        Command::Ground(a) => commands::ground(&cli.out, cfg, a),
        Command::Solve(a) => commands::solve(&cli.out, cfg, a),
        Command::Sweep(a) => commands::sweep(&cli.out, cfg, a),
        Command::Green(a) => commands::green(&cli.out, cfg, a),
        Command::Verify { suite } => verify::verify(&cli.out, suite),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
