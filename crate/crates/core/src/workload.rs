//! YCSB-style workload driver: one operation per transaction over fixed-size
//! numeric keys, with persists driven per commit, on a timer, or not at all.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::txn::Engine;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WorkloadKind {
    /// Point reads with probability `read_ratio`, otherwise updates.
    ReadOrWrite { read_ratio: f64 },
    /// Inserts of fresh keys.
    Insertion,
    /// Scans of `n` consecutive keys, `n` uniform in `[1, 100]`.
    RangeQuery,
    /// A read and an update of the same key.
    ReadModifyWrite,
}

impl WorkloadKind {
    pub fn label(&self) -> String {
        match self {
            WorkloadKind::ReadOrWrite { read_ratio } => format!("rw{:.0}", read_ratio * 100.0),
            WorkloadKind::Insertion => "insert".into(),
            WorkloadKind::RangeQuery => "range".into(),
            WorkloadKind::ReadModifyWrite => "rmw".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PersistMode {
    /// Only the caller persists.
    Never,
    /// Every committing thread persists right after its commit.
    PerCommit,
    /// A background persister runs with this period.
    Interval(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stop {
    After(Duration),
    /// Total committed operations across threads.
    Ops(u64),
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub records: u64,
    pub key_size: usize,
    pub value_size: usize,
    pub threads: usize,
    pub stop: Stop,
    pub seed: u64,
    pub persist: PersistMode,
    /// Each commit additionally waits until a persist covers it.
    pub group_commit: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::ReadOrWrite { read_ratio: 0.5 },
            records: 200_000,
            key_size: 16,
            value_size: 100,
            threads: 4,
            stop: Stop::After(Duration::from_secs(5)),
            seed: 42,
            persist: PersistMode::Interval(Duration::from_secs(5)),
            group_commit: false,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if let WorkloadKind::ReadOrWrite { read_ratio } = self.kind {
            if !(0.0..=1.0).contains(&read_ratio) {
                return bad("read ratio must be within [0, 1]");
            }
        }
        if self.key_size < 8 || self.key_size > crate::index::MAX_KEY {
            return bad("key size must be between 8 and the maximum key length");
        }
        if self.value_size == 0 || self.value_size > crate::index::MAX_VALUE {
            return bad("value size must be positive and within the maximum value length");
        }
        if self.threads == 0 {
            return bad("at least one thread is required");
        }
        if self.group_commit && self.persist == PersistMode::Never {
            return bad("group commit needs persists");
        }
        if self.kind != WorkloadKind::Insertion && self.records == 0 {
            return bad("this workload needs preloaded records");
        }
        Ok(())
    }
}

/// Key `i`, zero-padded decimal in `size` bytes.
pub fn key_for(i: u64, size: usize) -> Vec<u8> {
    format!("{i:0size$}").into_bytes()
}

fn value_for(rng: &mut impl Rng, size: usize) -> Vec<u8> {
    (0..size).map(|_| rng.gen_range(b'a'..=b'z')).collect()
}

/// Bijective mix so inserted keys land uniformly over the key space.
fn scatter(n: u64) -> u64 {
    let mut z = n.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inserts keys `0..records` in batches and persists.
pub fn preload(engine: &Engine, records: u64, key_size: usize, value_size: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 1000;
    let mut i = 0;
    while i < records {
        let mut t = engine.begin();
        for j in i..(i + batch).min(records) {
            t.put(&key_for(j, key_size), &value_for(&mut rng, value_size))?;
        }
        t.commit()?;
        i += batch;
    }
    engine.persist()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub workload: String,
    pub threads: usize,
    pub persist: String,
    pub group_commit: bool,
    pub ops: u64,
    pub aborts: u64,
    pub persists: u64,
    pub elapsed_s: f64,
    pub throughput: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    /// Commit-to-durable wait, group commit only.
    pub wait_p50_us: f64,
    pub wait_p99_us: f64,
    pub per_thread: Vec<u64>,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str =
        "workload,threads,persist,group_commit,ops,aborts,persists,elapsed_s,throughput,p50_us,p99_us,wait_p50_us,wait_p99_us";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{:.1},{:.1},{:.1},{:.1},{:.1}",
            self.workload,
            self.threads,
            self.persist,
            self.group_commit,
            self.ops,
            self.aborts,
            self.persists,
            self.elapsed_s,
            self.throughput,
            self.p50_us,
            self.p99_us,
            self.wait_p50_us,
            self.wait_p99_us
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "{} threads={} persist={}: {:.0} ops/s ({} ops in {:.2}s, {} aborts, {} persists), p50 {:.1}us p99 {:.1}us",
            self.workload,
            self.threads,
            self.persist,
            self.throughput,
            self.ops,
            self.elapsed_s,
            self.aborts,
            self.persists,
            self.p50_us,
            self.p99_us
        )
    }
}

pub fn persist_label(mode: PersistMode) -> String {
    match mode {
        PersistMode::Never => "never".into(),
        PersistMode::PerCommit => "per-commit".into(),
        PersistMode::Interval(d) => format!("{}ms", d.as_millis()),
    }
}

fn percentile(sorted: &[u32], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i] as f64
}

struct ThreadOutcome {
    ops: u64,
    aborts: u64,
    latencies: Vec<u32>,
    waits: Vec<u32>,
}

fn micros(d: Duration) -> u32 {
    d.as_micros().min(u32::MAX as u128) as u32
}

/// Runs `spec` against a preloaded engine (empty for insertion) and reports
/// throughput and begin-to-commit latency. Under group commit the latency
/// also covers the wait until a persist makes the commit durable.
pub fn run_workload(engine: &Engine, spec: &WorkloadSpec) -> Result<BenchResult> {
    spec.validate()?;
    let persists_before = engine.stats().persists;
    if let PersistMode::Interval(period) = spec.persist {
        engine.start_persister(period);
    }
    let done = AtomicBool::new(false);
    let committed = AtomicU64::new(0);
    let next_insert = AtomicU64::new(0);
    let start = Instant::now();
    let outcomes: Vec<Result<ThreadOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.threads)
            .map(|w| {
                let (done, committed, next_insert) = (&done, &committed, &next_insert);
                s.spawn(move || worker(engine, spec, w, start, done, committed, next_insert))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let elapsed = start.elapsed();
    if matches!(spec.persist, PersistMode::Interval(_)) {
        engine.stop_persister();
    }
    let mut latencies = Vec::new();
    let mut waits = Vec::new();
    let mut per_thread = Vec::new();
    let mut aborts = 0;
    for o in outcomes {
        let o = o?;
        per_thread.push(o.ops);
        aborts += o.aborts;
        latencies.extend(o.latencies);
        waits.extend(o.waits);
    }
    latencies.sort_unstable();
    waits.sort_unstable();
    let ops: u64 = per_thread.iter().sum();
    Ok(BenchResult {
        workload: spec.kind.label(),
        threads: spec.threads,
        persist: persist_label(spec.persist),
        group_commit: spec.group_commit,
        ops,
        aborts,
        persists: engine.stats().persists - persists_before,
        elapsed_s: elapsed.as_secs_f64(),
        throughput: ops as f64 / elapsed.as_secs_f64(),
        p50_us: percentile(&latencies, 0.5),
        p99_us: percentile(&latencies, 0.99),
        wait_p50_us: percentile(&waits, 0.5),
        wait_p99_us: percentile(&waits, 0.99),
        per_thread,
    })
}

fn worker(
    engine: &Engine,
    spec: &WorkloadSpec,
    id: usize,
    start: Instant,
    done: &AtomicBool,
    committed: &AtomicU64,
    next_insert: &AtomicU64,
) -> Result<ThreadOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(id as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let mut out = ThreadOutcome { ops: 0, aborts: 0, latencies: Vec::new(), waits: Vec::new() };
    let ks = spec.key_size;
    let key_space = 10u64.saturating_pow(ks.min(19) as u32);
    loop {
        if done.load(Ordering::Relaxed) {
            break;
        }
        match spec.stop {
            Stop::After(d) if start.elapsed() >= d => {
                done.store(true, Ordering::Relaxed);
                break;
            }
            Stop::Ops(n) if committed.load(Ordering::Relaxed) >= n => break,
            _ => {}
        }
        // draw the operation once; retries after an abort repeat it
        let key = key_for(rng.gen_range(0..spec.records.max(1)), ks);
        let value = value_for(&mut rng, spec.value_size);
        let read = matches!(spec.kind, WorkloadKind::ReadOrWrite { read_ratio } if rng.gen_bool(read_ratio));
        let span = rng.gen_range(1..=100u64);
        let insert_key = (spec.kind == WorkloadKind::Insertion)
            .then(|| key_for(scatter(next_insert.fetch_add(1, Ordering::Relaxed)) % key_space, ks));
        loop {
            let began = Instant::now();
            let mut t = engine.begin();
            let r = (|| -> Result<()> {
                match spec.kind {
                    WorkloadKind::ReadOrWrite { .. } if read => {
                        t.get(&key)?;
                    }
                    WorkloadKind::ReadOrWrite { .. } => t.put(&key, &value)?,
                    WorkloadKind::Insertion => t.put(insert_key.as_ref().unwrap(), &value)?,
                    WorkloadKind::RangeQuery => {
                        let first: u64 = std::str::from_utf8(&key).unwrap().parse().unwrap();
                        let last = (first + span - 1).min(spec.records.saturating_sub(1)).max(first);
                        t.getrange(&key, &key_for(last, ks))?;
                    }
                    WorkloadKind::ReadModifyWrite => {
                        t.get(&key)?;
                        t.put(&key, &value)?;
                    }
                }
                Ok(())
            })();
            let r = r.and_then(|_| t.commit());
            match r {
                Ok(info) => {
                    if spec.persist == PersistMode::PerCommit {
                        engine.persist()?;
                    }
                    if spec.group_commit {
                        let w = Instant::now();
                        engine.wait_durable(info);
                        out.waits.push(micros(w.elapsed()));
                    }
                    // with group commit this includes the wait for durability
                    out.latencies.push(micros(began.elapsed()));
                    out.ops += 1;
                    committed.fetch_add(1, Ordering::Relaxed);
                    break;
                }
                Err(Error::Aborted) => {
                    out.aborts += 1;
                    std::thread::yield_now();
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Write-only runs, one per persist interval, on the same engine.
pub fn sweep_window(engine: &Engine, base: &WorkloadSpec, intervals: &[Duration]) -> Result<Vec<BenchResult>> {
    intervals
        .iter()
        .map(|&i| {
            let spec = WorkloadSpec {
                kind: WorkloadKind::ReadOrWrite { read_ratio: 0.0 },
                persist: PersistMode::Interval(i),
                ..base.clone()
            };
            run_workload(engine, &spec)
        })
        .collect()
}
