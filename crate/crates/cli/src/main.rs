//! `bats-relay`: optimize, sweep and simulate adaptive recoding on a two-hop
//! relay with overhearing.

// `!(x > 0.0)` is how NaN gets rejected along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "bats-relay", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Best t_avg, batch count, idle time and efficiency, with the upper bound
    Optimize {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Efficiency curves over a t_avg range as CSV
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Start of the t_avg range
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        /// End of the t_avg range [default: 2M]
        #[arg(long)]
        to: Option<f64>,
    },
    /// Expected relay idle time for the optimal or a given recoding scheme
    Idle {
        #[command(flatten)]
        config: ConfigArgs,
        /// File with M+1 send counts t_0..t_M instead of the optimal scheme
        #[arg(long = "t-file")]
        t_file: Option<PathBuf>,
        /// Number of batches [default: ceil(F/E)]
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Efficiency limit when idle time vanishes
    UpperBound {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Packet-level simulation of whole transfers
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of independent transfers
        #[arg(long, default_value_t = 200)]
        runs: usize,
        /// File with M+1 send counts t_0..t_M instead of the optimal scheme
        #[arg(long = "t-file")]
        t_file: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Infeasible instance, I/O or simulation failure; exit code 1.
    Runtime(anyhow::Error),
}

impl From<bats_relay::error::Error> for CliError {
    fn from(e: bats_relay::error::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Optimize { config } => commands::optimize_cmd(&config.resolve()?, out),
        Command::Sweep { config, from, to } => {
            commands::sweep_cmd(&config.resolve()?, from, to, out)
        }
        Command::Idle {
            config,
            t_file,
            batches,
        } => commands::idle_cmd(&config.resolve()?, t_file.as_ref(), batches, out),
        Command::UpperBound { config } => commands::upper_bound_cmd(&config.resolve()?, out),
        Command::Simulate {
            config,
            runs,
            t_file,
        } => commands::simulate_cmd(&config.resolve()?, runs, t_file.as_ref(), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    let result = run(cli, &mut out).and_then(|()| out.flush().map_err(CliError::from));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
