//! Command-line driver for the association-game solvers. Every subcommand
//! reads a `key = value` configuration file and emits CSV (stdout or `--out`).
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure or
//! unwritable destination, 3 infeasibility flags under `--strict`.

mod commands;
mod config;
mod csvout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{CliError, CmdOutput, SweepParam, SweepSpec};

#[derive(Parser)]
#[command(name = "assoc-game", version, about = "WiFi/cellular association game solver")]
struct Cli {
    /// Treat infeasibility flags as an error (exit 3).
    #[arg(long, global = true)]
    strict: bool,
    /// Write CSV to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dump the conditional-utility table for the configured scenario.
    Utilities {
        #[arg(long)]
        config: PathBuf,
        /// Override every user's threshold.
        #[arg(long)]
        psi: Option<f64>,
    },
    /// Enumerate pure-strategy equilibria.
    Equilibria {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        psi: Option<f64>,
    },
    /// Centralized benchmark: everyone on cellular.
    Centralized {
        #[arg(long)]
        config: PathBuf,
    },
    /// Leader-led threshold choice (two-user or symmetric).
    Stackelberg {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fully non-cooperative two-user threshold fixed point.
    Noncoop {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep one parameter and report the selected equilibrium per point.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        steps: u32,
        #[arg(long)]
        config: PathBuf,
    },
    /// Leader outcome and price of anarchy across population sizes.
    PoaCurve {
        #[arg(long = "n-from")]
        n_from: u32,
        #[arg(long = "n-to")]
        n_to: u32,
        #[arg(long)]
        config: PathBuf,
    },
    /// Monte-Carlo validation report for the configured scenario.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analytic upper bound on the all-cellular population threshold.
    Bound {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<config::Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    config::parse_config(&text).map_err(Into::into)
}

fn dispatch(cli: &Cli) -> Result<CmdOutput, CliError> {
    match &cli.cmd {
        Cmd::Utilities { config, psi } => commands::cmd_utilities(&load_config(config)?, *psi),
        Cmd::Equilibria { config, psi } => commands::cmd_equilibria(&load_config(config)?, *psi),
        Cmd::Centralized { config } => commands::cmd_centralized(&load_config(config)?),
        Cmd::Stackelberg { config } => commands::cmd_stackelberg(&load_config(config)?),
        Cmd::Noncoop { config } => commands::cmd_noncoop(&load_config(config)?),
        Cmd::Sweep { param, from, to, steps, config } => {
            let spec = SweepSpec::new(SweepParam::parse(param)?, *from, *to, *steps)?;
            commands::cmd_sweep(&load_config(config)?, &spec)
        }
        Cmd::PoaCurve { n_from, n_to, config } => {
            commands::cmd_poa_curve(&load_config(config)?, *n_from, *n_to)
        }
        Cmd::Oracle { config, samples, seed } => {
            commands::cmd_oracle(&load_config(config)?, *samples, *seed)
        }
        Cmd::Bound { config } => commands::cmd_bound(&load_config(config)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let output = match dispatch(&cli) {
        Ok(out) => out,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
        Err(CliError::Numerics(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };

    let text = output.csv.render();
    if let Some(path) = &cli.out {
        if let Err(e) = std::fs::write(path, &text) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(2);
        }
    } else {
        print!("{text}");
    }

    if cli.strict && output.infeasible {
        eprintln!("infeasibility flags present (strict mode)");
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
