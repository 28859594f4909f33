use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use weakkv::workload::{self, BenchResult, PersistMode, Stop, WorkloadKind, WorkloadSpec};
use weakkv::Engine;

use crate::Geometry;

#[derive(Clone, Copy, ValueEnum)]
pub enum Workload {
    /// Point reads or updates, mixed by --read-ratio.
    Rw,
    /// Inserts of fresh keys.
    Insert,
    /// Scans of 1 to 100 consecutive keys.
    Range,
    /// Read and update of one key.
    Rmw,
}

#[derive(Args, Clone)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "rw")]
    workload: Workload,
    /// Preloaded records when the database is created here.
    #[arg(long, default_value_t = 200_000)]
    records: u64,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Fraction of point reads for the rw workload.
    #[arg(long, default_value_t = 0.5)]
    read_ratio: f64,
    /// Background persist period.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "5s")]
    persist_interval: Duration,
    /// Persist after every commit instead of on a timer.
    #[arg(long, conflicts_with = "persist_interval")]
    per_commit: bool,
    /// Each commit waits until a persist covers it.
    #[arg(long)]
    group_commit: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Run length.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "10s", conflicts_with = "ops")]
    duration: Duration,
    /// Stop after this many committed operations instead of a duration.
    #[arg(long)]
    ops: Option<u64>,
    /// Append result rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    geometry: Geometry,
}

impl BenchArgs {
    fn spec(&self, records: u64) -> WorkloadSpec {
        let kind = match self.workload {
            Workload::Rw => WorkloadKind::ReadOrWrite { read_ratio: self.read_ratio },
            Workload::Insert => WorkloadKind::Insertion,
            Workload::Range => WorkloadKind::RangeQuery,
            Workload::Rmw => WorkloadKind::ReadModifyWrite,
        };
        WorkloadSpec {
            kind,
            records,
            threads: self.threads,
            stop: self.ops.map_or(Stop::After(self.duration), Stop::Ops),
            seed: self.seed,
            persist: if self.per_commit { PersistMode::PerCommit } else { PersistMode::Interval(self.persist_interval) },
            group_commit: self.group_commit,
            ..WorkloadSpec::default()
        }
    }
}

/// A database file that is removed on drop when it was made up here.
struct Target {
    path: PathBuf,
    scratch: bool,
}

impl Drop for Target {
    fn drop(&mut self) {
        if self.scratch {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

/// Opens the benchmark database, creating and preloading it when new.
/// Returns the engine and the number of records it holds.
fn prepare(db: Option<&Path>, args: &BenchArgs, preload: bool) -> Result<(Target, Engine, u64)> {
    let target = match db {
        Some(p) => Target { path: p.to_path_buf(), scratch: false },
        None => Target {
            path: std::env::temp_dir().join(format!("weakkv-bench-{}.db", std::process::id())),
            scratch: true,
        },
    };
    if target.path.exists() && !target.scratch {
        let engine = Engine::open_path(&target.path, args.geometry.config(args.records))?;
        let records = engine.stats().index.persisted_records;
        return Ok((target, engine, records));
    }
    let records = if preload { args.records } else { 0 };
    let engine = Engine::open_path(&target.path, args.geometry.config(args.records))?;
    if records > 0 {
        eprintln!("preloading {records} records into {}", target.path.display());
        workload::preload(&engine, records, 16, 100, args.seed)?;
    }
    Ok((target, engine, records))
}

fn report(results: &[BenchResult], csv: Option<&Path>) -> Result<()> {
    for r in results {
        println!("{}", r.summary());
    }
    if let Some(path) = csv {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", BenchResult::CSV_HEADER)?;
        }
        for r in results {
            writeln!(f, "{}", r.csv_row())?;
        }
    }
    Ok(())
}

pub fn bench(db: Option<&Path>, args: &BenchArgs) -> Result<()> {
    let preload = !matches!(args.workload, Workload::Insert);
    let (_target, engine, records) = prepare(db, args, preload)?;
    let spec = args.spec(records);
    spec.validate()?;
    let result = workload::run_workload(&engine, &spec)?;
    engine.close()?;
    report(&[result], args.csv.as_deref())
}

pub fn sweep(db: Option<&Path>, args: &BenchArgs, intervals: &[Duration]) -> Result<()> {
    if args.per_commit {
        bail!("sweep-window varies the persist interval; --per-commit does not apply");
    }
    let (_target, engine, records) = prepare(db, args, true)?;
    let spec = args.spec(records);
    spec.validate()?;
    let results = workload::sweep_window(&engine, &spec, intervals)?;
    engine.close()?;
    report(&results, args.csv.as_deref())
}
