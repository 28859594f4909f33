mod admin;
mod bench;
mod check;

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "weakkv", version, about = "Transactional key-value store with decoupled durability")]
struct Cli {
    /// Database file.
    #[arg(long, global = true, env = "WEAKKV_DB")]
    db: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a database, optionally preloading records.
    Create {
        #[command(flatten)]
        geometry: Geometry,
        /// Records to preload (16-byte keys, 100-byte values).
        #[arg(long, default_value_t = 0)]
        records: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print header, page-table and tree statistics.
    Inspect {
        #[arg(long)]
        json: bool,
    },
    /// Run recovery and report its wall time.
    Recover {
        #[arg(long)]
        json: bool,
    },
    /// Run one benchmark workload.
    Bench(bench::BenchArgs),
    /// Write-only runs over a list of persist intervals.
    SweepWindow {
        #[command(flatten)]
        bench: bench::BenchArgs,
        /// Comma-separated intervals, e.g. 1ms,100ms,1s,10s.
        #[arg(long, value_delimiter = ',', value_parser = humantime::parse_duration,
              default_value = "1ms,100ms,1s,10s")]
        intervals: Vec<Duration>,
    },
    /// Verification harness.
    #[command(subcommand)]
    Check(check::CheckCommand),
}

#[derive(Args, Clone)]
pub struct Geometry {
    /// Logical pages (4 KiB each); defaults to 65536 or what the record
    /// count needs.
    #[arg(long)]
    logical_pages: Option<u32>,
    /// Skip-list arena size in records.
    #[arg(long)]
    skiplist_capacity: Option<u32>,
    /// Cap on cached tree-node bytes; unbounded when absent.
    #[arg(long)]
    cache_bytes: Option<usize>,
    /// Worker threads for merges.
    #[arg(long, default_value_t = 1)]
    merge_workers: usize,
}

impl Geometry {
    pub fn config(&self, records: u64) -> weakkv::EngineConfig {
        let mut config = weakkv::EngineConfig::default();
        // room for records at half-full pages, twice over
        let needed = (records.saturating_mul(16 + 100 + 8) * 4 / 4096) as u32;
        config.shadow.logical_capacity = self.logical_pages.unwrap_or(needed.max(1 << 16));
        if let Some(c) = self.skiplist_capacity {
            config.index.skiplist_capacity = c;
        }
        config.index.cache_bytes = self.cache_bytes;
        config.index.merge_workers = self.merge_workers;
        config
    }
}

fn db_path(cli_db: &Option<PathBuf>) -> Result<PathBuf> {
    cli_db.clone().context("no database given: pass --db or set WEAKKV_DB")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Create { geometry, records, seed } => admin::create(&db_path(&cli.db)?, &geometry, records, seed),
        Command::Inspect { json } => admin::inspect(&db_path(&cli.db)?, json),
        Command::Recover { json } => admin::recover(&db_path(&cli.db)?, json),
        Command::Bench(args) => bench::bench(cli.db.as_deref(), &args),
        Command::SweepWindow { bench: args, intervals } => bench::sweep(cli.db.as_deref(), &args, &intervals),
        Command::Check(cmd) => check::run(cmd),
    }
}
