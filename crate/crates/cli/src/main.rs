//! Experiment runner for desk-scale federated code-review fine-tuning.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedreview::error::Error;

#[derive(Parser)]
#[command(name = "fedreview", version, about = "Federated LoRA fine-tuning experiments for code-review tasks")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed (overrides FEDREVIEW_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Client-training parallelism bound.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or ingest) corpora and write project-disjoint client shards.
    Partition,
    /// Run an individual-task federation or a multi-task strategy.
    Run {
        /// individual | toc | cot | cat | cft | cft_reg
        #[arg(long)]
        strategy: Option<String>,
        /// Also train and report the non-federated central baseline.
        #[arg(long)]
        with_central: bool,
        /// inproc | tcp (loopback sockets inside this process)
        #[arg(long, default_value = "inproc")]
        transport: String,
    },
    /// Serve a federation round loop over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
    },
    /// Participate in a served federation as one client.
    Client {
        #[arg(long, default_value = "127.0.0.1:7070")]
        connect: String,
        #[arg(long)]
        client_id: u32,
    },
    /// Consolidate completed runs into one comparison report.
    Report {
        /// Directory containing run outputs (summary.csv files).
        dir: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Data(_)
        | Error::Io(_)
        | Error::Input(_)
        | Error::State(_)
        | Error::Capacity { .. }
        | Error::Degenerate(_) => 2,
        Error::Training { .. } | Error::NonFinite { .. } | Error::Dimension { .. } | Error::Range { .. } => 3,
        Error::Protocol { .. } | Error::Transport(_) | Error::Aggregation(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<(), Error> {
        let mut settings = config::load(cli.config.as_deref(), cli.seed, cli.jobs)?;
        match &cli.cmd {
            Cmd::Partition => commands::cmd_partition(&settings),
            Cmd::Run {
                strategy,
                with_central,
                transport,
            } => {
                if let Some(s) = strategy {
                    settings.strategy = s.clone();
                }
                if *with_central {
                    settings.with_central = true;
                }
                commands::cmd_run(&settings, transport)
            }
            Cmd::Serve { listen } => commands::cmd_serve(&settings, listen),
            Cmd::Client { connect, client_id } => commands::cmd_client(&settings, connect, *client_id),
            Cmd::Report { dir } => report::cmd_report(dir),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
