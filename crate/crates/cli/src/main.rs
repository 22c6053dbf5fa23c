//! `scd`: command line front end for the semantic change engine.
//!
//! Every subcommand reads one JSON config; `--seed`, `--out` and `--threads`
//! override the matching config fields. Failures exit nonzero with the
//! failing stage in brackets on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scd_core::pipeline::{run_command, Command, PipelineConfig, RunStatus, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "scd", version, about = "Diachronic semantic change detection")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; every stage seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Validate a store, apply the configured filters and write the result.
    Ingest(Common),
    /// Generate the configured synthetic corpus with its ground truth.
    Synth(Common),
    /// Fit and save the configured clusterings.
    Cluster(Common),
    /// Compute metric series and their rolling means.
    Metrics(Common),
    /// Permutation tests of prototype shifts with adjusted p-values.
    Permtest(Common),
    /// Tabulate the most frequent dependency heads.
    Deps(Common),
    /// Run every stage and bundle plot-ready data.
    Report(Common),
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::Ingest(c) => (Command::Ingest, c),
            Sub::Synth(c) => (Command::Synth, c),
            Sub::Cluster(c) => (Command::Cluster, c),
            Sub::Metrics(c) => (Command::Metrics, c),
            Sub::Permtest(c) => (Command::Permtest, c),
            Sub::Deps(c) => (Command::Deps, c),
            Sub::Report(c) => (Command::Report, c),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (command, common) = cli.command.split();
    let mut config = PipelineConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = common.out {
        config.out_dir = out;
    }
    if let Some(threads) = common.threads {
        config.threads = Some(threads);
    }
    let output = run_command(command, &config)?;
    let manifest = &output.manifest;
    debug_assert_eq!(manifest.status, RunStatus::Complete);
    println!(
        "{}: {} artifacts, manifest at {}",
        command.as_str(),
        manifest.artifacts.len(),
        config.out_dir.join(MANIFEST_FILE).display()
    );
    for series in &output.series {
        if let Some(top) = series.argmax() {
            println!("  {} ({}): max {} at {}", series.metric, series.variant, top.value, top.key());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scd: {e:#}");
            ExitCode::FAILURE
        }
    }
}
