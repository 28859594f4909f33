//! Schedules: interleavings of transaction primitives and persists, with a
//! line-oriented text form.
//!
//! ```text
//! # comment
//! 0 put x 0
//! 0 commit
//! * persist
//! 1 get x
//! 1 put y @y+1        derived: this txn's view of y, plus one
//! 1 getrange a c
//! 1 delete z
//! 1 abort
//! ```

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TxnId = u32;

/// Value written by a put: literal bytes, or an integer derived from the
/// writing transaction's view of some key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Literal(Vec<u8>),
    Derived { key: Vec<u8>, delta: i64 },
}

/// A transaction's own operation, independent of scheduling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgOp {
    Get(Vec<u8>),
    GetRange(Vec<u8>, Vec<u8>),
    Put(Vec<u8>, Operand),
    Delete(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Op(TxnId, ProgOp),
    Commit(TxnId),
    Abort(TxnId),
    Persist,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: Vec<Step>,
}

/// Integer reading of a stored value; absent or non-numeric reads as 0.
pub fn as_int(value: Option<&[u8]>) -> i64 {
    value.and_then(|v| std::str::from_utf8(v).ok()).and_then(|s| s.parse().ok()).unwrap_or(0)
}

pub fn int_value(n: i64) -> Vec<u8> {
    n.to_string().into_bytes()
}

impl Operand {
    /// Resolves against the transaction's view of keys.
    pub fn resolve(&self, view: impl FnOnce(&[u8]) -> Option<Vec<u8>>) -> Vec<u8> {
        match self {
            Operand::Literal(v) => v.clone(),
            Operand::Derived { key, delta } => int_value(as_int(view(key).as_deref()) + delta),
        }
    }
}

fn show(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Literal(v) => write!(f, "{}", show(v)),
            Operand::Derived { key, delta } => write!(f, "@{}{:+}", show(key), delta),
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Op(t, ProgOp::Get(k)) => write!(f, "{t} get {}", show(k)),
            Step::Op(t, ProgOp::GetRange(a, b)) => write!(f, "{t} getrange {} {}", show(a), show(b)),
            Step::Op(t, ProgOp::Put(k, v)) => write!(f, "{t} put {} {v}", show(k)),
            Step::Op(t, ProgOp::Delete(k)) => write!(f, "{t} delete {}", show(k)),
            Step::Commit(t) => write!(f, "{t} commit"),
            Step::Abort(t) => write!(f, "{t} abort"),
            Step::Persist => write!(f, "* persist"),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

fn parse_operand(tok: &str) -> Result<Operand> {
    let Some(rest) = tok.strip_prefix('@') else { return Ok(Operand::Literal(tok.as_bytes().to_vec())) };
    let split = rest.rfind(['+', '-']).filter(|&i| i > 0);
    let (key, delta) = match split {
        Some(i) => {
            let delta = rest[i..].parse().map_err(|_| Error::InvalidArgument(format!("bad operand delta in {tok}")))?;
            (&rest[..i], delta)
        }
        None => (rest, 0),
    };
    Ok(Operand::Derived { key: key.as_bytes().to_vec(), delta })
}

impl Schedule {
    pub fn parse(text: &str) -> Result<Schedule> {
        let mut steps = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::InvalidArgument(format!("line {}: {m}: {raw}", n + 1));
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() >= 2 && toks[1] == "persist" {
                steps.push(Step::Persist);
                continue;
            }
            let txn: TxnId = toks[0].parse().map_err(|_| bad("transaction id must be a number"))?;
            let arg = |i: usize| toks.get(i).map(|s| s.as_bytes().to_vec()).ok_or_else(|| bad("missing operand"));
            let step = match toks.get(1).copied() {
                Some("get") => Step::Op(txn, ProgOp::Get(arg(2)?)),
                Some("getrange") => Step::Op(txn, ProgOp::GetRange(arg(2)?, arg(3)?)),
                Some("put") => {
                    let v = toks.get(3).ok_or_else(|| bad("put needs a value"))?;
                    Step::Op(txn, ProgOp::Put(arg(2)?, parse_operand(v)?))
                }
                Some("delete") => Step::Op(txn, ProgOp::Delete(arg(2)?)),
                Some("commit") => Step::Commit(txn),
                Some("abort") => Step::Abort(txn),
                _ => return Err(bad("unknown operation")),
            };
            steps.push(step);
        }
        Ok(Schedule { steps })
    }

    pub fn txns(&self) -> Vec<TxnId> {
        let mut ids: Vec<TxnId> = self
            .steps
            .iter()
            .filter_map(|s| match s {
                Step::Op(t, _) | Step::Commit(t) | Step::Abort(t) => Some(*t),
                Step::Persist => None,
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The two-transaction history over `x < y`, with an initial loader
    /// (transaction 0) persisted first. `persist_at` inserts a persist before
    /// the given step of the eight-step history (8 = after the end).
    pub fn constraint_example(persist_at: Option<usize>) -> Schedule {
        let text = "\
            1 get x\n1 get y\n1 put y @y+1\n1 commit\n\
            2 get x\n2 get y\n2 put x @y-1\n2 commit\n";
        let body = Schedule::parse(text).unwrap().steps;
        let mut steps = Schedule::parse("0 put x 0\n0 put y 1\n0 commit\n* persist\n").unwrap().steps;
        for (i, s) in body.into_iter().enumerate() {
            if persist_at == Some(i) {
                steps.push(Step::Persist);
            }
            steps.push(s);
        }
        if persist_at == Some(8) {
            steps.push(Step::Persist);
        }
        Schedule { steps }
    }
}

#[derive(Debug, Clone)]
pub struct RandomSpec {
    pub txns: usize,
    pub max_ops: usize,
    pub keys: usize,
    pub persist_prob: f64,
    pub abort_prob: f64,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec { txns: 6, max_ops: 4, keys: 8, persist_prob: 0.15, abort_prob: 0.1 }
    }
}

pub fn key_name(i: usize) -> Vec<u8> {
    format!("k{i}").into_bytes()
}

/// A random program over `keys` keys.
pub fn random_program(rng: &mut impl Rng, max_ops: usize, keys: usize) -> Vec<ProgOp> {
    let n = rng.gen_range(1..=max_ops);
    let key = |rng: &mut dyn rand::RngCore| key_name(rng.gen_range(0..keys));
    (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0..=2 => ProgOp::Get(key(rng)),
            3 => {
                let (a, b) = (key(rng), key(rng));
                ProgOp::GetRange(a.clone().min(b.clone()), a.max(b))
            }
            4..=5 => ProgOp::Put(key(rng), Operand::Literal(int_value(rng.gen_range(1..100)))),
            6..=8 => ProgOp::Put(key(rng), Operand::Derived { key: key(rng), delta: rng.gen_range(1..5) }),
            _ => ProgOp::Delete(key(rng)),
        })
        .collect()
}

/// A random interleaving of random programs, with occasional persists and
/// explicit aborts.
pub fn random_schedule(seed: u64, spec: &RandomSpec) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<(TxnId, std::collections::VecDeque<Step>)> = (0..spec.txns)
        .map(|t| {
            let t = t as TxnId + 1;
            let mut q: std::collections::VecDeque<Step> =
                random_program(&mut rng, spec.max_ops, spec.keys).into_iter().map(|op| Step::Op(t, op)).collect();
            q.push_back(if rng.gen_bool(spec.abort_prob) { Step::Abort(t) } else { Step::Commit(t) });
            (t, q)
        })
        .collect();
    let mut steps = Vec::new();
    while !queues.is_empty() {
        if rng.gen_bool(spec.persist_prob) {
            steps.push(Step::Persist);
        }
        let i = rng.gen_range(0..queues.len());
        let step = queues[i].1.pop_front().unwrap();
        steps.push(step);
        if queues[i].1.is_empty() {
            queues.swap_remove(i);
        }
    }
    if rng.gen_bool(0.5) {
        steps.push(Step::Persist);
    }
    Schedule { steps }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let s = Schedule::constraint_example(Some(4));
        assert_eq!(Schedule::parse(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn parses_derived_operands() {
        assert_eq!(parse_operand("@y+1").unwrap(), Operand::Derived { key: b"y".to_vec(), delta: 1 });
        assert_eq!(parse_operand("@y-1").unwrap(), Operand::Derived { key: b"y".to_vec(), delta: -1 });
        assert_eq!(parse_operand("@y").unwrap(), Operand::Derived { key: b"y".to_vec(), delta: 0 });
        assert!(parse_operand("@a-b").is_err());
        assert_eq!(parse_operand("7").unwrap(), Operand::Literal(b"7".to_vec()));
    }

    #[test]
    fn rejects_unknown_ops() {
        assert!(Schedule::parse("1 frob x").is_err());
        assert!(Schedule::parse("x get y").is_err());
        assert!(Schedule::parse("1 put y").is_err());
    }

    #[test]
    fn random_schedules_are_reproducible() {
        let spec = RandomSpec::default();
        assert_eq!(random_schedule(3, &spec), random_schedule(3, &spec));
        assert_ne!(random_schedule(3, &spec), random_schedule(4, &spec));
        let s = random_schedule(3, &spec);
        assert_eq!(s.txns().len(), spec.txns);
    }
}
