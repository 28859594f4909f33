//! Recorded histories and the checks run against them: serial re-execution,
//! the persist-prefix projection of a crash, and prefix preservation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use super::schedule::{Operand, ProgOp, TxnId};

pub type State = BTreeMap<Vec<u8>, Vec<u8>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum EventKind {
    Read { key: Vec<u8>, value: Option<Vec<u8>> },
    RangeRead { k1: Vec<u8>, k2: Vec<u8>, result: Vec<(Vec<u8>, Vec<u8>)> },
    /// `None` is a delete.
    Write { key: Vec<u8>, value: Option<Vec<u8>> },
    Commit { seq: u64 },
    /// `requested` is false when a lock conflict forced the abort.
    Abort { requested: bool },
    /// `started_at` and the event's `storage_ops` bracket the persist's
    /// device operations.
    PersistComplete { epoch: u64, started_at: usize },
    PersistFailed { started_at: usize, error: String },
    /// A step of a transaction that had already aborted.
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEvent {
    pub seq: usize,
    pub txn: Option<TxnId>,
    pub kind: EventKind,
    /// Device operations issued up to the end of this event.
    pub storage_ops: usize,
}

impl EventKind {
    pub fn is_observation(&self) -> bool {
        matches!(self, EventKind::Read { .. } | EventKind::RangeRead { .. })
    }
}

/// Runs one program against `state`, returning its reads and writes in the
/// order a transaction would issue them. A derived put first reads its
/// source key unless the program already read or wrote it.
pub fn execute_program(state: &mut State, ops: &[ProgOp]) -> Vec<EventKind> {
    let mut out = Vec::new();
    let mut touched: HashSet<Vec<u8>> = HashSet::new();
    for op in ops {
        match op {
            ProgOp::Get(k) => {
                touched.insert(k.clone());
                out.push(EventKind::Read { key: k.clone(), value: state.get(k).cloned() });
            }
            ProgOp::GetRange(a, b) => {
                let result = if a <= b {
                    state.range(a.clone()..=b.clone()).map(|(k, v)| (k.clone(), v.clone())).collect()
                } else {
                    Vec::new()
                };
                out.push(EventKind::RangeRead { k1: a.clone(), k2: b.clone(), result });
            }
            ProgOp::Put(k, operand) => {
                if let Operand::Derived { key, .. } = operand {
                    if touched.insert(key.clone()) {
                        out.push(EventKind::Read { key: key.clone(), value: state.get(key).cloned() });
                    }
                }
                let v = operand.resolve(|key| state.get(key).cloned());
                touched.insert(k.clone());
                state.insert(k.clone(), v.clone());
                out.push(EventKind::Write { key: k.clone(), value: Some(v) });
            }
            ProgOp::Delete(k) => {
                touched.insert(k.clone());
                state.remove(k);
                out.push(EventKind::Write { key: k.clone(), value: None });
            }
        }
    }
    out
}

/// The state after running `programs` one at a time, in order, from `initial`.
pub fn serial_oracle<'a>(initial: &State, programs: impl IntoIterator<Item = &'a [ProgOp]>) -> State {
    let mut state = initial.clone();
    for p in programs {
        execute_program(&mut state, p);
    }
    state
}

/// Committed transactions in commit order, each with its history position.
pub fn commit_order(history: &[HistoryEvent]) -> Vec<(usize, TxnId)> {
    history
        .iter()
        .filter_map(|e| match (&e.kind, e.txn) {
            (EventKind::Commit { .. }, Some(t)) => Some((e.seq, t)),
            _ => None,
        })
        .collect()
}

/// Numbers of committed transactions (a prefix of commit order) that a crash
/// after `at` device operations may legitimately leave durable. A crash in
/// the middle of a persist may land on either side of it.
pub fn pc_boundaries(history: &[HistoryEvent], at: usize) -> Vec<usize> {
    let mut committed = 0usize;
    let mut durable = 0usize;
    let mut in_flight = None;
    for e in history {
        match &e.kind {
            EventKind::Commit { .. } => committed += 1,
            EventKind::PersistComplete { started_at, .. } => {
                if e.storage_ops <= at {
                    durable = committed;
                } else if *started_at < at {
                    in_flight = Some(committed);
                }
            }
            _ => {}
        }
    }
    let mut out = vec![durable];
    if let Some(c) = in_flight.filter(|&c| c != durable) {
        out.push(c);
    }
    out
}

#[derive(Debug, Clone)]
pub struct PcVerdict {
    pub pass: bool,
    /// Candidate boundaries, as counts of committed transactions.
    pub boundaries: Vec<usize>,
    pub matched: Option<usize>,
    pub recovered: State,
    pub expected: Vec<State>,
}

/// Compares a recovered state with the serial execution of every committed
/// transaction up to a legitimate persist boundary.
pub fn check_pc_projection(
    history: &[HistoryEvent],
    programs: &HashMap<TxnId, Vec<ProgOp>>,
    initial: &State,
    at: usize,
    recovered: &State,
) -> PcVerdict {
    let order = commit_order(history);
    let boundaries = pc_boundaries(history, at);
    let expected: Vec<State> = boundaries
        .iter()
        .map(|&b| serial_oracle(initial, order[..b].iter().map(|(_, t)| programs[t].as_slice())))
        .collect();
    let matched = expected.iter().position(|s| s == recovered).map(|i| boundaries[i]);
    PcVerdict { pass: matched.is_some(), boundaries, matched, recovered: recovered.clone(), expected }
}

/// Re-executes the committed programs serially in commit order and checks
/// that every recorded read matches and that the final state agrees.
pub fn check_serial_equivalence(
    initial: &State,
    committed: &[(Vec<ProgOp>, Vec<EventKind>)],
    final_state: &State,
) -> Result<(), String> {
    let mut state = initial.clone();
    for (i, (ops, recorded)) in committed.iter().enumerate() {
        let replay = execute_program(&mut state, ops);
        let want: Vec<&EventKind> = replay.iter().filter(|e| e.is_observation()).collect();
        let got: Vec<&EventKind> = recorded.iter().filter(|e| e.is_observation()).collect();
        if want != got {
            return Err(format!("commit #{i}: reads {got:?} differ from serial replay {want:?}"));
        }
    }
    if &state != final_state {
        return Err(format!("final state {} differs from serial replay {}", show_state(final_state), show_state(&state)));
    }
    Ok(())
}

/// If a transaction read or wrote a key after another transaction wrote
/// it, the writer must have committed first, and before the reader's commit.
pub fn check_prefix_preservation(history: &[HistoryEvent]) -> Result<(), String> {
    let mut commit_at: HashMap<TxnId, usize> = HashMap::new();
    let mut aborted: Vec<TxnId> = Vec::new();
    for e in history {
        match (&e.kind, e.txn) {
            (EventKind::Commit { .. }, Some(t)) => {
                commit_at.insert(t, e.seq);
            }
            (EventKind::Abort { .. }, Some(t)) => aborted.push(t),
            _ => {}
        }
    }
    // last write per key by a transaction that did not abort
    let mut last_writer: HashMap<Vec<u8>, TxnId> = HashMap::new();
    let touch = |key: &[u8], t: TxnId, seq: usize, last: &HashMap<Vec<u8>, TxnId>| -> Result<(), String> {
        let Some(&w) = last.get(key) else { return Ok(()) };
        if w == t {
            return Ok(());
        }
        let Some(&wc) = commit_at.get(&w) else {
            return Err(format!("event {seq}: txn {t} accessed {} written by uncommitted txn {w}", show(key)));
        };
        if wc > seq {
            return Err(format!("event {seq}: txn {t} accessed {} before writer {w} committed", show(key)));
        }
        if let Some(&tc) = commit_at.get(&t) {
            if tc < wc {
                return Err(format!("txn {t} committed before txn {w} it depends on"));
            }
        }
        Ok(())
    };
    for e in history {
        let Some(t) = e.txn else { continue };
        match &e.kind {
            EventKind::Read { key, .. } => touch(key, t, e.seq, &last_writer)?,
            EventKind::RangeRead { result, .. } => {
                for (k, _) in result {
                    touch(k, t, e.seq, &last_writer)?;
                }
            }
            EventKind::Write { key, .. } => {
                touch(key, t, e.seq, &last_writer)?;
                if !aborted.contains(&t) {
                    last_writer.insert(key.clone(), t);
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn show(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

pub fn show_state(s: &State) -> String {
    let parts: Vec<String> = s.iter().map(|(k, v)| format!("{}={}", show(k), show(v))).collect();
    format!("{{{}}}", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::schedule::{Schedule, Step};

    fn programs_of(s: &Schedule) -> HashMap<TxnId, Vec<ProgOp>> {
        let mut out: HashMap<TxnId, Vec<ProgOp>> = HashMap::new();
        for step in &s.steps {
            if let Step::Op(t, op) = step {
                out.entry(*t).or_default().push(op.clone());
            }
        }
        out
    }

    fn st(pairs: &[(&str, &str)]) -> State {
        pairs.iter().map(|(k, v)| (k.as_bytes().to_vec(), v.as_bytes().to_vec())).collect()
    }

    #[test]
    fn serial_oracle_of_constraint_history() {
        let p = programs_of(&Schedule::constraint_example(None));
        let init = serial_oracle(&State::new(), [p[&0].as_slice()]);
        assert_eq!(init, st(&[("x", "0"), ("y", "1")]));
        let both = serial_oracle(&init, [p[&1].as_slice(), p[&2].as_slice()]);
        assert_eq!(both, st(&[("x", "1"), ("y", "2")]));
        // the opposite order is also serial, and keeps x < y
        let rev = serial_oracle(&init, [p[&2].as_slice(), p[&1].as_slice()]);
        assert_eq!(rev, st(&[("x", "0"), ("y", "2")]));
    }

    #[test]
    fn single_txn_serial_is_identity_of_its_effects() {
        let s = Schedule::parse("1 put a 5\n1 put b @a+2\n1 delete a\n1 commit").unwrap();
        let p = programs_of(&s);
        assert_eq!(serial_oracle(&State::new(), [p[&1].as_slice()]), st(&[("b", "7")]));
    }

    fn ev(seq: usize, txn: Option<TxnId>, kind: EventKind, ops: usize) -> HistoryEvent {
        HistoryEvent { seq, txn, kind, storage_ops: ops }
    }

    #[test]
    fn boundaries_around_a_persist() {
        let h = vec![
            ev(0, Some(1), EventKind::Commit { seq: 0 }, 10),
            ev(1, None, EventKind::PersistComplete { epoch: 1, started_at: 10 }, 20),
            ev(2, Some(2), EventKind::Commit { seq: 1 }, 20),
            ev(3, None, EventKind::PersistComplete { epoch: 2, started_at: 20 }, 30),
        ];
        assert_eq!(pc_boundaries(&h, 5), vec![0]);
        assert_eq!(pc_boundaries(&h, 10), vec![0]);
        assert_eq!(pc_boundaries(&h, 15), vec![0, 1]);
        assert_eq!(pc_boundaries(&h, 20), vec![1]);
        assert_eq!(pc_boundaries(&h, 25), vec![1, 2]);
        assert_eq!(pc_boundaries(&h, 30), vec![2]);
    }

    #[test]
    fn prefix_violation_detected() {
        let w = |s, t, k: &str| ev(s, Some(t), EventKind::Write { key: k.into(), value: Some(b"1".to_vec()) }, 0);
        let r = |s, t, k: &str| ev(s, Some(t), EventKind::Read { key: k.into(), value: None }, 0);
        let c = |s, t| ev(s, Some(t), EventKind::Commit { seq: s as u64 }, 0);
        let ok = vec![w(0, 1, "a"), c(1, 1), r(2, 2, "a"), c(3, 2)];
        assert!(check_prefix_preservation(&ok).is_ok());
        let dirty = vec![w(0, 1, "a"), r(1, 2, "a"), c(2, 2), c(3, 1)];
        assert!(check_prefix_preservation(&dirty).is_err());
        let aborted_writer = vec![w(0, 1, "a"), ev(1, Some(1), EventKind::Abort { requested: true }, 0), r(2, 2, "a")];
        assert!(check_prefix_preservation(&aborted_writer).is_ok());
    }

    #[test]
    fn serial_equivalence_flags_wrong_read() {
        let ops = vec![ProgOp::Get(b"a".to_vec())];
        let good = vec![(ops.clone(), vec![EventKind::Read { key: b"a".to_vec(), value: None }])];
        assert!(check_serial_equivalence(&State::new(), &good, &State::new()).is_ok());
        let bad = vec![(ops, vec![EventKind::Read { key: b"a".to_vec(), value: Some(b"9".to_vec()) }])];
        assert!(check_serial_equivalence(&State::new(), &bad, &State::new()).is_err());
    }
}
