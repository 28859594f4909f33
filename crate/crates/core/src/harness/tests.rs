use std::sync::Arc;

use super::*;
use crate::storage::CrashSimDevice;
use crate::txn::Engine;

fn st(pairs: &[(&str, &str)]) -> State {
    pairs.iter().map(|(k, v)| (k.as_bytes().to_vec(), v.as_bytes().to_vec())).collect()
}

fn b(s: &str) -> Vec<u8> {
    s.as_bytes().to_vec()
}

fn compact(run: &RunOutcome, skip_txn0: bool) -> Vec<String> {
    run.history
        .iter()
        .filter(|e| !(skip_txn0 && e.txn == Some(0)))
        .filter_map(|e| {
            let t = e.txn.map(|t| t.to_string()).unwrap_or_default();
            let s = |v: &Option<Vec<u8>>| v.as_deref().map(|v| String::from_utf8_lossy(v).into_owned()).unwrap_or("-".into());
            Some(match &e.kind {
                EventKind::Read { key, value } => format!("r{t}({},{})", String::from_utf8_lossy(key), s(value)),
                EventKind::Write { key, value } => format!("w{t}({},{})", String::from_utf8_lossy(key), s(value)),
                EventKind::Commit { .. } => format!("c{t}"),
                EventKind::Abort { .. } => format!("a{t}"),
                EventKind::PersistComplete { .. } => "p".into(),
                _ => return None,
            })
        })
        .collect()
}

#[test]
fn serial_single_txn_history_follows_schedule() {
    let s = Schedule::parse("1 put a 1\n1 get a\n1 delete a\n1 commit").unwrap();
    let run = run_schedule(&s, &harness_config()).unwrap();
    assert_eq!(compact(&run, false), ["w1(a,1)", "r1(a,1)", "w1(a,-)", "c1"]);
    let seqs: Vec<usize> = run.history.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..4).collect::<Vec<_>>());
    assert!(run.final_state.is_empty());
}

#[test]
fn constraint_history_is_reproduced() {
    let run = run_schedule(&Schedule::constraint_example(None), &harness_config()).unwrap();
    let h = compact(&run, true);
    assert_eq!(h[0], "p");
    assert_eq!(h[1..], ["r1(x,0)", "r1(y,1)", "w1(y,2)", "c1", "r2(x,0)", "r2(y,2)", "w2(x,1)", "c2"]);
    assert_eq!(run.final_state, st(&[("x", "1"), ("y", "2")]));
    run.check_clean().unwrap();
}

#[test]
fn conflicting_interleavings_abort_the_second_accessor() {
    // every pair of accesses to one key where at least one writes
    let ops = ["get a", "put a 5", "delete a"];
    for first in ops {
        for second in ops {
            if first == "get a" && second == "get a" {
                continue;
            }
            let text = format!("0 put a 1\n0 commit\n1 {first}\n2 {second}\n1 commit\n2 commit\n");
            let run = run_schedule(&Schedule::parse(&text).unwrap(), &harness_config()).unwrap();
            assert_eq!(run.committed, vec![0, 1], "{first} / {second}");
            let aborts: Vec<_> = run
                .history
                .iter()
                .filter(|e| matches!(e.kind, EventKind::Abort { requested: false }))
                .map(|e| e.txn)
                .collect();
            assert_eq!(aborts, vec![Some(2)], "{first} / {second}");
            // the commit of the aborted transaction is skipped
            assert!(run.history.iter().any(|e| e.txn == Some(2) && e.kind == EventKind::Skipped));
        }
    }
}

#[test]
fn inserts_into_one_gap_conflict() {
    // both keys would land in the gap below the sentinel
    let s = Schedule::parse("1 put a 1\n2 put b 2\n2 commit\n1 commit\n").unwrap();
    let run = run_schedule(&s, &harness_config()).unwrap();
    assert_eq!(run.committed, vec![1]);
    assert_eq!(run.final_state, st(&[("a", "1")]));
}

#[test]
fn shared_readers_do_not_conflict() {
    let text = "0 put a 1\n0 commit\n1 get a\n2 get a\n1 commit\n2 commit\n";
    let run = run_schedule(&Schedule::parse(text).unwrap(), &harness_config()).unwrap();
    assert_eq!(run.committed, vec![0, 1, 2]);
}

#[test]
fn schedule_using_committed_txn_is_rejected() {
    let s = Schedule::parse("1 put a 1\n1 commit\n1 get a\n").unwrap();
    assert!(matches!(run_schedule(&s, &harness_config()), Err(crate::Error::InvalidArgument(_))));
}

#[test]
fn open_transactions_are_aborted_at_the_end() {
    let s = Schedule::parse("0 put a 1\n0 put b 1\n0 commit\n1 put a 2\n2 put b 2\n2 commit\n").unwrap();
    let run = run_schedule(&s, &harness_config()).unwrap();
    assert_eq!(run.final_state, st(&[("a", "1"), ("b", "2")]));
    assert_eq!(compact(&run, false).last().unwrap(), "a1");
}

#[test]
fn serial_oracle_of_nothing_is_empty() {
    assert!(serial_oracle(&State::new(), std::iter::empty::<&[ProgOp]>()).is_empty());
}

#[test]
fn non_conflicting_programs_commute() {
    let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(11);
    for _ in 0..200 {
        // programs over disjoint key sets cannot conflict
        let p1 = random_program(&mut rng, 4, 4);
        let p2: Vec<ProgOp> = random_program(&mut rng, 4, 4)
            .into_iter()
            .map(|op| {
                let shift = |k: &Vec<u8>| [b"z".as_slice(), k].concat();
                match op {
                    ProgOp::Get(k) => ProgOp::Get(shift(&k)),
                    ProgOp::GetRange(a, b) => ProgOp::GetRange(shift(&a), shift(&b)),
                    ProgOp::Put(k, Operand::Derived { key, delta }) => {
                        ProgOp::Put(shift(&k), Operand::Derived { key: shift(&key), delta })
                    }
                    ProgOp::Put(k, v) => ProgOp::Put(shift(&k), v),
                    ProgOp::Delete(k) => ProgOp::Delete(shift(&k)),
                }
            })
            .collect();
        let ab = serial_oracle(&State::new(), [p1.as_slice(), p2.as_slice()]);
        let ba = serial_oracle(&State::new(), [p2.as_slice(), p1.as_slice()]);
        assert_eq!(ab, ba);
    }
}

#[test]
fn crash_without_persist_recovers_initial_state() {
    let s = Schedule::parse("1 put a 1\n1 commit\n").unwrap();
    let run = run_schedule(&s, &harness_config()).unwrap();
    let plan = CrashPlan { at: run.storage_ops(), subset: SubsetChoice::All };
    let v = run.check_crash(&plan).unwrap();
    assert!(v.pass);
    assert!(v.recovered.is_empty());
    assert_eq!(v.boundaries, vec![0]);
}

#[test]
fn persist_between_commits_recovers_first_commit_only() {
    let run = run_schedule(&Schedule::constraint_example(Some(4)), &harness_config()).unwrap();
    let at = run.storage_ops();
    let v = run.check_crash(&CrashPlan { at, subset: SubsetChoice::All }).unwrap();
    assert!(v.pass);
    assert_eq!(v.recovered, st(&[("x", "0"), ("y", "2")]));
    // the anomaly state is not a legitimate recovery
    let bad = check_pc_projection(&run.history, &run.programs, &State::new(), at, &st(&[("x", "1"), ("y", "1")]));
    assert!(!bad.pass);
}

#[test]
fn mid_flush_crashes_land_on_either_boundary() {
    let s = Schedule::parse("1 put a 1\n1 commit\n* persist\n2 put a 2\n2 put b 3\n2 commit\n* persist\n").unwrap();
    let run = run_schedule(&s, &harness_config()).unwrap();
    let (start, end) = run
        .history
        .iter()
        .rev()
        .find_map(|e| match e.kind {
            EventKind::PersistComplete { started_at, .. } => Some((started_at, e.storage_ops)),
            _ => None,
        })
        .unwrap();
    let mut seen = BTreeSet::new();
    for at in start..=end {
        for subset in [SubsetChoice::Nothing, SubsetChoice::All, SubsetChoice::Seeded(at as u64)] {
            let v = run.check_crash(&CrashPlan { at, subset }).unwrap();
            assert!(v.pass, "crash at {at}: {}", show_state(&v.recovered));
            seen.insert(v.matched.unwrap());
        }
    }
    assert_eq!(seen, BTreeSet::from([1, 2]));
}

#[test]
fn single_position_constraint_scenario_is_clean() {
    let run = run_schedule(&Schedule::constraint_example(Some(4)), &harness_config()).unwrap();
    for at in 0..=run.storage_ops() {
        let v = run.check_crash(&CrashPlan { at, subset: SubsetChoice::Seeded(at as u64) }).unwrap();
        assert!(v.pass);
        let xy = (v.recovered.get(b"x".as_slice()).cloned(), v.recovered.get(b"y".as_slice()).cloned());
        assert_ne!(xy, (Some(b("1")), Some(b("1"))));
    }
}

#[test]
fn small_crash_suite_passes() {
    let r = crash_suite(5, 40, 5, &RandomSpec::default(), &harness_config()).unwrap();
    assert!(r.pass(), "{:#?}", r.failures);
    assert_eq!(r.cases, 200);
}

#[test]
fn concurrent_run_is_serializable() {
    let engine = Engine::open(Arc::new(CrashSimDevice::new(harness_config().device_pages())), harness_config()).unwrap();
    let spec = ConcurrentSpec { threads: 3, txns: 150, keys: 6, max_ops: 4, seed: 3 };
    let out = run_concurrent(&engine, &spec).unwrap();
    assert_eq!(out.committed.len(), 150);
    check_serial_equivalence(&State::new(), &out.committed, &out.final_state).unwrap();
}

#[test]
fn schedule_file_runs() {
    let text = "# loader\n0 put x 0\n0 put y 1\n0 commit\n* persist\n1 get y\n1 put y @y+1\n1 commit\n";
    let run = run_schedule(&Schedule::parse(text).unwrap(), &harness_config()).unwrap();
    assert_eq!(run.final_state, st(&[("x", "0"), ("y", "2")]));
}
