//! Command-line front end: `simulate` runs the Monte Carlo study,
//! `select` scores user-supplied multi-treatment data, `missing` handles the
//! binary missing-indicator variant.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 runtime abort.

use anyhow::Context;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod config;
mod missing;
mod select;
mod sim;
mod tables;

#[derive(Parser)]
#[command(name = "mscp", version, about = "IPW/DR estimation and Cp-type model selection for marginal structural models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo study described by a config file.
    Simulate {
        /// TOML study configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the replication count.
        #[arg(long)]
        reps: Option<usize>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the worker thread count (0 = automatic).
        #[arg(long)]
        threads: Option<usize>,
        /// Also dump this replication of the first cell as a selection-mode
        /// dataset with its in-study criterion values.
        #[arg(long)]
        dump_rep: Option<u64>,
    },
    /// Evaluate the criteria on a per-(sample, arm) data file.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Evaluate the missing-data criteria on a binary-indicator data file.
    Missing {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

enum Failure {
    /// Invalid configuration, schema or data format: exit 2.
    Usage(anyhow::Error),
    /// Study or I/O failure at runtime: exit 3.
    Runtime(anyhow::Error),
}

fn usage<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn cmd_simulate(
    config_path: &Path,
    reps: Option<usize>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    threads: Option<usize>,
    dump_rep: Option<u64>,
) -> Result<(), Failure> {
    let mut file = usage(config::load(config_path))?;
    if let Some(r) = reps {
        file.replications = Some(r);
    }
    if let Some(s) = seed {
        file.master_seed = Some(s);
    }
    if let Some(dir) = out_dir {
        file.out_dir = Some(dir.to_string_lossy().into_owned());
    }
    if let Some(t) = threads {
        file.threads = Some(t);
    }
    let resolved = usage(config::resolve(file))?;
    init_threads(resolved.threads);
    runtime(sim::run(&resolved, dump_rep))
}

fn write_criteria_output(
    rows: &[tables::CriteriaRow],
    out_dir: &Path,
    hash: &str,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;
    tables::write_criteria(rows, hash, &out_dir.join("criteria.csv"))
}

fn cmd_select(data: &Path, spec: &Path, out_dir: &Path) -> Result<(), Failure> {
    let spec_parsed = usage(select::load_spec(spec))?;
    let data_parsed = usage(select::read_select_data(data))?;
    let rows = usage(select::evaluate(&spec_parsed, &data_parsed))?;
    let hash = content_hash(data, spec)?;
    runtime(write_criteria_output(&rows, out_dir, &hash))
}

fn cmd_missing(data: &Path, spec: &Path, out_dir: &Path) -> Result<(), Failure> {
    let spec_parsed = usage(missing::load_spec(spec))?;
    let data_parsed = usage(missing::read_missing_data(data))?;
    let rows = usage(missing::evaluate(&spec_parsed, &data_parsed))?;
    let hash = content_hash(data, spec)?;
    runtime(write_criteria_output(&rows, out_dir, &hash))
}

fn content_hash(data: &Path, spec: &Path) -> Result<String, Failure> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for path in [data, spec] {
        let bytes = runtime(
            std::fs::read(path).with_context(|| format!("cannot read {}", path.display())),
        )?;
        hasher.update(&bytes);
    }
    Ok(hex::encode(&hasher.finalize()[..16]))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            reps,
            seed,
            out_dir,
            threads,
            dump_rep,
        } => cmd_simulate(&config, reps, seed, out_dir, threads, dump_rep),
        Command::Select { data, spec, out_dir } => cmd_select(&data, &spec, &out_dir),
        Command::Missing { data, spec, out_dir } => cmd_missing(&data, &spec, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
