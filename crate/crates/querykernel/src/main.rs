use std::path::PathBuf;

use clap::{Parser, Subcommand};

use querykernel::cli;

#[derive(Parser)]
#[command(name = "querykernel", version, about = "Query-efficient black-box optimization runs, audits and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run config (TOML, or JSON); writes trace.jsonl and summary.json.
    Run { config: PathBuf },
    /// Serve run state over HTTP, executing any configs given.
    Serve {
        #[arg(long, default_value_t = 8750)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        configs: Vec<PathBuf>,
    },
    /// Statistical parity and equal opportunity gaps of a pred,actual,group CSV.
    Audit { csv: PathBuf },
    /// Run a named benchmark with seeds 0..N.
    Bench {
        name: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
}

fn main() {
    let code = match Cli::parse().command {
        Command::Run { config } => cli::run_command(&config),
        Command::Serve { port, host, configs } => cli::serve_command(&host, port, &configs),
        Command::Audit { csv } => cli::audit_command(&csv),
        Command::Bench { name, seeds, out } => cli::bench_command(&name, seeds, &out),
    };
    std::process::exit(code);
}
