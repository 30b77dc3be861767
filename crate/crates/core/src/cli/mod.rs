//! Command-line front end.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
use commands::Context;
use config::RunConfig;

/// Exit status for a numerical failure.
pub const EXIT_NUMERICAL: i32 = 1;
/// Exit status for a bad configuration or command line.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fracmix", version, about = "Concave-convex fractional problems with mixed exterior data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Random seed (overrides the config value).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// No progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker thread cap.
    #[arg(long, global = true, env = "FRACMIX_THREADS", hide_env_values = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Minimal solutions along the lambda list.
    Solve,
    /// Bracket the extremal parameter.
    Bracket,
    /// Mountain-pass second solutions.
    Second,
    /// Run the randomized inequality suite.
    Verify,
    /// Write the discretization (nodes, weights, exterior masses).
    Export,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidDomain(_) | Error::InvalidParameter(_) | Error::TooLarge { .. } | Error::Unsupported(_) => {
            EXIT_CONFIG
        }
        _ => EXIT_NUMERICAL,
    }
}

/// Parse `args` and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: thread cap must be positive");
            return EXIT_CONFIG;
        }
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let config = match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let ctx = Context {
        seed: cli.seed.unwrap_or(config.seed),
        out: cli.out.clone().unwrap_or_else(|| config.output.dir.clone()),
        quiet: cli.quiet,
        config,
    };
    let result = match cli.command {
        Command::Solve => commands::cmd_solve(&ctx).map(|_| true),
        Command::Bracket => commands::cmd_bracket(&ctx).map(|_| true),
        Command::Second => commands::cmd_second(&ctx).map(|_| true),
        Command::Verify => commands::cmd_verify(&ctx),
        Command::Export => commands::cmd_export(&ctx).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => EXIT_NUMERICAL,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
