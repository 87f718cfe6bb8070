//! `resolvent-lab`: runs simulations, resolvent estimates, grid solves and
//! bound verification sweeps from a JSON config.
//!
//! Exit status: 0 on success, 2 when a bound report fails, 1 on any error.

mod config;
mod tasks;

use anyhow::{Context, Result};
use clap::Parser;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Parser)]
#[command(name = "resolvent-lab", version, about)]
struct Cli {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to RESOLVENT_LAB_WORKERS, then the config.
    #[arg(long, env = "RESOLVENT_LAB_WORKERS")]
    workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// `dotted.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    code_version: &'static str,
    seed: u64,
    workers: usize,
    timestamp_unix: u64,
    config: &'a config::RunConfig,
    outputs: &'a [String],
    all_pass: bool,
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = config::load(&cli.config, &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let workers =
        cli.workers.or(cfg.workers).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    anyhow::ensure!(workers >= 1, "workers must be >= 1");
    let outdir = cli.outdir.or_else(|| cfg.outdir.clone()).unwrap_or_else(|| PathBuf::from("resolvent-lab-out"));
    std::fs::create_dir_all(&outdir).with_context(|| format!("creating {}", outdir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let out = pool.install(|| tasks::run(&cfg, &outdir))?;
    let manifest = Manifest {
        tool: "resolvent-lab",
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        workers,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        config: &cfg,
        outputs: &out.files,
        all_pass: out.all_pass,
    };
    let file = std::fs::File::create(outdir.join("manifest.json"))?;
    resolvent_core::io::write_json(std::io::BufWriter::new(file), &manifest)?;
    Ok(out.all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("resolvent-lab: at least one bound report failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("resolvent-lab: {e:#}");
            ExitCode::from(1)
        }
    }
}
