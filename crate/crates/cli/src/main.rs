use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use poi_icl_cli::commands::{cmd_bench, cmd_prepare, cmd_report, cmd_run, RunOptions};
use poi_icl_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "poi-icl", version, about = "Demonstration selection experiments for next-POI prediction")]
struct Cli {
    /// TOML run configuration. Defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` (the run directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Render and save prompts without calling the backend.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Overrides `backend.kind`: mock, mock:<policy> or remote.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest check-ins, segment and split them, write the dataset archive.
    Prepare,
    /// Run the strategy × k grid against the backend.
    Run {
        /// Stop after this many new records; rerun to resume.
        #[arg(long)]
        max_records: Option<usize>,
    },
    /// Benchmark selection cost per test instance.
    Bench,
    /// Build result tables and plot series from record archives.
    Report {
        /// Record archives; defaults to `<out>/records.jsonl`.
        archives: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(backend) = &cli.backend {
        config.set_backend(backend)?;
    }

    match cli.command {
        Command::Prepare => {
            let summary = cmd_prepare(&config)?;
            print!("{}", summary.render());
        }
        Command::Run { max_records } => {
            let options = RunOptions {
                dry_run: cli.dry_run,
                max_new_records: max_records,
            };
            let s = cmd_run(&config, &options)?;
            if cli.dry_run {
                println!("{} prompts written to {}", s.prompts_written, config.out.join("prompts.jsonl").display());
            } else {
                println!(
                    "{} records written ({} already complete), {} backend calls; records in {}",
                    s.records_written,
                    s.already_complete,
                    s.backend_calls,
                    s.records_path.display()
                );
            }
        }
        Command::Bench => {
            let report = cmd_bench(&config)?;
            println!("pool {} trajectories, {} tasks", report.pool_size, report.tasks);
            println!("{:<14} {:>4} {:>14} {:>14} {:>14}", "strategy", "k", "mean_us", "p50_us", "p95_us");
            for r in &report.rows {
                println!("{:<14} {:>4} {:>14.1} {:>14.1} {:>14.1}", r.strategy, r.k, r.mean_us, r.p50_us, r.p95_us);
            }
        }
        Command::Report { archives } => {
            let archives = if archives.is_empty() {
                vec![config.out.join("records.jsonl")]
            } else {
                archives
            };
            let report = cmd_report(&archives, &config.out.join("report"), config.breakdown_cap)?;
            print!("{}", report.render_text());
        }
    }
    Ok(())
}
