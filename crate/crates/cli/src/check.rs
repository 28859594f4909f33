use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Subcommand;
use serde_json::json;
use weakkv::harness::{
    self, constraint_scenario, crash_suite, explore_protocol, harness_config, run_schedule, show_state, CrashPlan,
    RandomSpec, Schedule, Variant,
};
use weakkv::SubsetChoice;

#[derive(Subcommand)]
pub enum CheckCommand {
    /// Run a schedule file and check it crash-free; optionally crash it at
    /// every device operation.
    Schedule {
        file: PathBuf,
        /// Also crash at every device operation, keeping each given number
        /// of random subsets of unsynced writes (plus none and all).
        #[arg(long)]
        crashes: Option<u64>,
    },
    /// Exhaustively explore the client/persister protocol model.
    Explore {
        #[arg(long, default_value_t = 3)]
        clients: usize,
        #[arg(long, default_value_t = 12)]
        depth: usize,
        /// Explore the variant that checks the flag before counting.
        #[arg(long)]
        mutant: bool,
        #[arg(long, default_value_t = 5_000_000)]
        max_states: usize,
    },
    /// Random schedules with random crash points.
    Suite {
        #[arg(long, default_value_t = 2000)]
        schedules: usize,
        #[arg(long, default_value_t = 5)]
        plans: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// The two-transaction constraint history, persisted and crashed
    /// everywhere.
    Scenario,
}

fn finish(pass: bool, report: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !pass {
        bail!("check failed");
    }
    Ok(())
}

pub fn run(cmd: CheckCommand) -> Result<()> {
    let config = harness_config();
    match cmd {
        CheckCommand::Schedule { file, crashes } => {
            let schedule = Schedule::parse(&std::fs::read_to_string(&file)?)?;
            let run = run_schedule(&schedule, &config)?;
            let clean = run.check_clean();
            let mut failures = Vec::new();
            let mut cases = 0;
            if let Some(samples) = crashes {
                let mut subsets = vec![SubsetChoice::Nothing, SubsetChoice::All];
                subsets.extend((0..samples).map(SubsetChoice::Seeded));
                for at in 0..=run.storage_ops() {
                    for subset in &subsets {
                        cases += 1;
                        let verdict = run.check_crash(&CrashPlan { at, subset: subset.clone() })?;
                        if !verdict.pass {
                            failures.push(format!(
                                "crash at {at} ({subset:?}): recovered {}",
                                show_state(&verdict.recovered)
                            ));
                        }
                    }
                }
            }
            let pass = clean.is_ok() && failures.is_empty();
            finish(
                pass,
                json!({
                    "pass": pass,
                    "steps": schedule.steps.len(),
                    "committed": run.committed.len(),
                    "final_state": harness::show_state(&run.final_state),
                    "clean": clean.err().unwrap_or_else(|| "ok".into()),
                    "crash_cases": cases,
                    "crash_failures": failures,
                }),
            )
        }
        CheckCommand::Explore { clients, depth, mutant, max_states } => {
            let variant = if mutant { Variant::CheckFirst } else { Variant::Correct };
            let report = explore_protocol(clients, depth, variant, max_states);
            let pass = report.pass();
            let mut value = serde_json::to_value(&report)?;
            value["pass"] = pass.into();
            finish(pass, value)
        }
        CheckCommand::Suite { schedules, plans, seed } => {
            let report = crash_suite(seed, schedules, plans, &RandomSpec::default(), &config)?;
            let pass = report.pass();
            let mut value = serde_json::to_value(&report)?;
            value["pass"] = pass.into();
            finish(pass, value)
        }
        CheckCommand::Scenario => {
            let report = constraint_scenario(&config)?;
            let pass = report.pass();
            let mut value = serde_json::to_value(&report)?;
            value["pass"] = pass.into();
            finish(pass, value)
        }
    }
}
