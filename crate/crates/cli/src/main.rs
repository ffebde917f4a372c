//! `incparse`: command-line entry point for the probing toolkit.

mod args;
mod commands;
mod output;
mod source;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Ingest(a) => commands::corpus::ingest(a),
        Command::Synth(a) => commands::corpus::synth(a, seed),
        Command::Embed(c) => commands::corpus::embed(c, seed),
        Command::Probe(c) => commands::probe::probe(c, cli.seed),
        Command::Parse(a) => commands::probe::parse(a, seed),
        Command::Structural(c) => commands::structural::structural(c, seed),
        Command::Npz(c) => commands::experiments::npz(c, seed),
        Command::Cfx(c) => commands::experiments::cfx(c, seed),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let report = serde_json::json!({ "error": chain.join(": ") });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
