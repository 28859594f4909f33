//! Verification harness: schedule runner, oracles, crash enumeration and the
//! protocol explorer.

mod explore;
mod history;
mod runner;
mod schedule;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::storage::SubsetChoice;
use crate::txn::EngineConfig;

pub use explore::{explore_protocol, ExploreReport, Variant};
pub use history::{
    check_pc_projection, check_prefix_preservation, check_serial_equivalence, commit_order, execute_program,
    pc_boundaries, serial_oracle, show_state, EventKind, HistoryEvent, PcVerdict, State,
};
pub use runner::{
    exec_op, harness_config, live_state, recover, run_concurrent, run_schedule, ConcurrentOutcome, ConcurrentSpec,
    RunOutcome, View,
};
pub use schedule::{
    as_int, int_value, key_name, random_program, random_schedule, Operand, ProgOp, RandomSpec, Schedule, Step, TxnId,
};

/// A crash after `at` device operations; `subset` picks which writes issued
/// since the last sync survive.
#[derive(Debug, Clone)]
pub struct CrashPlan {
    pub at: usize,
    pub subset: SubsetChoice,
}

impl RunOutcome {
    /// Crashes per `plan`, recovers, and checks the result against the
    /// persisted-prefix oracle.
    pub fn check_crash(&self, plan: &CrashPlan) -> Result<PcVerdict> {
        let recovered = self.recover(plan.at, &plan.subset)?;
        Ok(check_pc_projection(&self.history, &self.programs, &State::new(), plan.at, &recovered))
    }

    /// Crash-free checks: serial equivalence in commit order and prefix
    /// preservation.
    pub fn check_clean(&self) -> std::result::Result<(), String> {
        check_serial_equivalence(&State::new(), &self.committed_with_events(), &self.final_state)?;
        check_prefix_preservation(&self.history)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrashSuiteReport {
    pub schedules: usize,
    pub cases: usize,
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl CrashSuiteReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Random schedules, each crashed at `plans_per_schedule` random device
/// operations with a random surviving subset. Every run is also checked
/// crash-free.
pub fn crash_suite(
    seed: u64,
    schedules: usize,
    plans_per_schedule: usize,
    spec: &RandomSpec,
    config: &EngineConfig,
) -> Result<CrashSuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut cases = 0;
    for _ in 0..schedules {
        let schedule_seed = rng.gen();
        let schedule = random_schedule(schedule_seed, spec);
        let run = run_schedule(&schedule, config)?;
        if let Err(e) = run.check_clean() {
            failures.push(format!("schedule seed {schedule_seed}: {e}"));
        }
        let ops = run.storage_ops();
        for _ in 0..plans_per_schedule {
            let plan = CrashPlan { at: rng.gen_range(0..=ops), subset: SubsetChoice::Seeded(rng.gen()) };
            cases += 1;
            let verdict = run.check_crash(&plan)?;
            if !verdict.pass {
                failures.push(format!(
                    "schedule seed {schedule_seed}, crash at {} ({:?}): recovered {}, expected one of {:?}",
                    plan.at,
                    plan.subset,
                    show_state(&verdict.recovered),
                    verdict.expected.iter().map(show_state).collect::<Vec<_>>()
                ));
            }
        }
    }
    Ok(CrashSuiteReport { schedules, cases, failures, elapsed: start.elapsed() })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub runs: usize,
    pub recoveries: usize,
    /// Distinct recovered `(x, y)` pairs.
    pub observed: BTreeSet<(i64, i64)>,
    pub violations: Vec<String>,
    pub elapsed: Duration,
}

impl ScenarioReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Surviving-subset choices for a crash with `pending` unsynced writes: all
/// of them when few, otherwise a seeded sample.
fn subsets(pending: usize) -> Vec<SubsetChoice> {
    if pending <= 12 {
        (0..1u32 << pending).map(|m| SubsetChoice::Mask((0..pending).map(|i| m >> i & 1 == 1).collect())).collect()
    } else {
        (0..4096).map(SubsetChoice::Seeded).collect()
    }
}

/// The two-transaction `x < y` history with a persist at every position,
/// crashed at every device operation after the initial state became durable
/// and with every surviving subset of unsynced writes.
pub fn constraint_scenario(config: &EngineConfig) -> Result<ScenarioReport> {
    let start = Instant::now();
    let allowed: BTreeSet<(i64, i64)> = [(0, 1), (0, 2), (1, 2)].into();
    let mut report =
        ScenarioReport { runs: 0, recoveries: 0, observed: BTreeSet::new(), violations: Vec::new(), elapsed: start.elapsed() };
    let positions = std::iter::once(None).chain((0..=8).map(Some));
    for persist_at in positions {
        let run = run_schedule(&Schedule::constraint_example(persist_at), config)?;
        report.runs += 1;
        if let Err(e) = run.check_clean() {
            report.violations.push(format!("persist at {persist_at:?}: {e}"));
        }
        let loaded = run
            .history
            .iter()
            .find(|e| matches!(e.kind, EventKind::PersistComplete { .. }))
            .map(|e| e.storage_ops)
            .expect("loader persist");
        for at in loaded..=run.storage_ops() {
            for subset in subsets(run.device.pending_at(at)) {
                let plan = CrashPlan { at, subset };
                let verdict = run.check_crash(&plan)?;
                report.recoveries += 1;
                let get = |k: &[u8]| as_int(verdict.recovered.get(k).map(|v| v.as_slice()));
                let xy = (get(b"x"), get(b"y"));
                report.observed.insert(xy);
                if !allowed.contains(&xy) || verdict.recovered.len() != 2 || !verdict.pass {
                    report.violations.push(format!(
                        "persist at {persist_at:?}, crash at {at} ({:?}): recovered {}",
                        plan.subset,
                        show_state(&verdict.recovered)
                    ));
                }
            }
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

#[cfg(test)]
mod tests;
