//! Drives schedules through real client threads, one per transaction, with
//! the coordinator handing each step over and waiting for its result.

use std::collections::HashMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::history::{EventKind, HistoryEvent, State};
use super::schedule::{random_program, Operand, ProgOp, Schedule, Step, TxnId};
use crate::error::{Error, Result};
use crate::index::IndexConfig;
use crate::shadow::ShadowConfig;
use crate::storage::{BlockDevice, CrashSimDevice, SubsetChoice};
use crate::txn::{Engine, EngineConfig, Transaction};

/// Small geometry suited to many short runs.
pub fn harness_config() -> EngineConfig {
    EngineConfig {
        shadow: ShadowConfig { logical_capacity: 64, delta_region_pages: 8 },
        index: IndexConfig { skiplist_capacity: 1024, ..IndexConfig::default() },
        lock_shards: 4,
        ..EngineConfig::default()
    }
}

/// Keys a transaction has already read or written, with its view of them.
pub type View = HashMap<Vec<u8>, Option<Vec<u8>>>;

/// Runs one program step inside `t`, returning what it observed and wrote.
/// A derived put reads its source key only if `view` lacks it.
pub fn exec_op(t: &mut Transaction, op: &ProgOp, view: &mut View) -> Result<Vec<EventKind>> {
    let mut out = Vec::new();
    match op {
        ProgOp::Get(k) => {
            let value = t.get(k)?;
            view.insert(k.clone(), value.clone());
            out.push(EventKind::Read { key: k.clone(), value });
        }
        ProgOp::GetRange(a, b) => {
            let result = t.getrange(a, b)?;
            out.push(EventKind::RangeRead { k1: a.clone(), k2: b.clone(), result });
        }
        ProgOp::Put(k, operand) => {
            if let Operand::Derived { key, .. } = operand {
                if !view.contains_key(key) {
                    let value = t.get(key)?;
                    view.insert(key.clone(), value.clone());
                    out.push(EventKind::Read { key: key.clone(), value });
                }
            }
            let v = operand.resolve(|key| view.get(key).cloned().flatten());
            t.put(k, &v)?;
            view.insert(k.clone(), Some(v.clone()));
            out.push(EventKind::Write { key: k.clone(), value: Some(v) });
        }
        ProgOp::Delete(k) => {
            t.delete(k)?;
            view.insert(k.clone(), None);
            out.push(EventKind::Write { key: k.clone(), value: None });
        }
    }
    Ok(out)
}

/// Live records of an engine, tombstones dropped.
pub fn live_state(engine: &Engine) -> Result<State> {
    Ok(engine.index().contents()?.into_iter().filter(|(_, v)| !v.is_empty()).collect())
}

enum Cmd {
    Op(ProgOp),
    Commit,
    Abort,
}

type Reply = Result<Vec<EventKind>>;

struct Client {
    tx: Sender<Cmd>,
    rx: Receiver<Reply>,
    handle: JoinHandle<()>,
}

fn spawn_client(engine: Arc<Engine>) -> Client {
    let (tx, cmd_rx) = channel::<Cmd>();
    let (reply_tx, rx) = channel::<Reply>();
    let handle = std::thread::spawn(move || {
        let mut t = engine.begin();
        let mut view = View::new();
        for cmd in cmd_rx {
            let r = match cmd {
                Cmd::Op(op) => exec_op(&mut t, &op, &mut view),
                Cmd::Commit => t.commit().map(|info| vec![EventKind::Commit { seq: info.seq }]),
                Cmd::Abort => t.abort().map(|_| vec![EventKind::Abort { requested: true }]),
            };
            let r = match r {
                Err(Error::Aborted) => Ok(vec![EventKind::Abort { requested: false }]),
                r => r,
            };
            if reply_tx.send(r).is_err() {
                break;
            }
        }
    });
    Client { tx, rx, handle }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Active,
    Committed,
    Aborted,
}

pub struct RunOutcome {
    pub history: Vec<HistoryEvent>,
    /// Operations each transaction executed, in order.
    pub programs: HashMap<TxnId, Vec<ProgOp>>,
    /// Committed transactions in commit order.
    pub committed: Vec<TxnId>,
    pub final_state: State,
    pub device: Arc<CrashSimDevice>,
    pub config: EngineConfig,
}

impl RunOutcome {
    /// Device operations recorded over the whole run.
    pub fn storage_ops(&self) -> usize {
        self.device.op_count()
    }

    /// Reopens the database from the image a crash after `at` device
    /// operations leaves, and returns its live records.
    pub fn recover(&self, at: usize, subset: &SubsetChoice) -> Result<State> {
        recover(&self.device, at, subset, &self.config)
    }

    /// Committed programs with the reads and writes they performed, in
    /// commit order.
    pub fn committed_with_events(&self) -> Vec<(Vec<ProgOp>, Vec<EventKind>)> {
        self.committed
            .iter()
            .map(|t| {
                let events = self.history.iter().filter(|e| e.txn == Some(*t)).map(|e| e.kind.clone()).collect();
                (self.programs[t].clone(), events)
            })
            .collect()
    }
}

pub fn recover(device: &CrashSimDevice, at: usize, subset: &SubsetChoice, config: &EngineConfig) -> Result<State> {
    let image: Arc<dyn BlockDevice> = Arc::new(device.crash_image(at, subset));
    let engine = Engine::open(image, config.clone())?;
    engine.index().check_invariants(false)?;
    live_state(&engine)
}

/// Executes `schedule` step by step on a fresh in-memory crash-simulating
/// device. A transaction aborted by a lock conflict has its remaining steps
/// skipped; transactions left open at the end are aborted.
pub fn run_schedule(schedule: &Schedule, config: &EngineConfig) -> Result<RunOutcome> {
    let device = Arc::new(CrashSimDevice::new(config.device_pages()));
    let engine = Arc::new(Engine::open(device.clone(), config.clone())?);
    let mut clients: HashMap<TxnId, Client> = HashMap::new();
    let mut status: HashMap<TxnId, Status> = HashMap::new();
    let mut programs: HashMap<TxnId, Vec<ProgOp>> = HashMap::new();
    let mut committed = Vec::new();
    let mut history: Vec<HistoryEvent> = Vec::new();
    let mut expected_persists = engine.stats().persists;

    let push = |history: &mut Vec<HistoryEvent>, txn, kind| {
        let seq = history.len();
        history.push(HistoryEvent { seq, txn, kind, storage_ops: device.op_count() });
    };

    let steps = schedule.steps.iter().cloned().chain(
        schedule.txns().into_iter().map(Step::Abort), // closes anything left open
    );
    let n_scheduled = schedule.steps.len();
    for (i, step) in steps.enumerate() {
        let closing = i >= n_scheduled;
        let (txn, cmd) = match step {
            Step::Persist => {
                let started_at = device.op_count();
                let kind = match engine.persist() {
                    Ok(e) => {
                        expected_persists += 1;
                        EventKind::PersistComplete { epoch: e.0, started_at }
                    }
                    Err(e) => EventKind::PersistFailed { started_at, error: e.to_string() },
                };
                push(&mut history, None, kind);
                continue;
            }
            Step::Op(t, op) => (t, Cmd::Op(op)),
            Step::Commit(t) => (t, Cmd::Commit),
            Step::Abort(t) => (t, Cmd::Abort),
        };
        match status.get(&txn).copied() {
            Some(Status::Committed) if closing => continue,
            Some(Status::Committed) => {
                return Err(Error::InvalidArgument(format!("step {i} uses txn {txn}, which already committed")));
            }
            Some(Status::Aborted) => {
                if !closing {
                    push(&mut history, Some(txn), EventKind::Skipped);
                }
                continue;
            }
            Some(Status::Active) => {}
            None => {
                clients.insert(txn, spawn_client(engine.clone()));
                status.insert(txn, Status::Active);
                programs.insert(txn, Vec::new());
            }
        }
        if let Cmd::Op(op) = &cmd {
            programs.entry(txn).or_default().push(op.clone());
        }
        let client = &clients[&txn];
        client.tx.send(cmd).map_err(|_| Error::InvalidState("client thread exited"))?;
        let events = client.rx.recv().map_err(|_| Error::InvalidState("client thread exited"))??;
        for kind in events {
            match kind {
                EventKind::Commit { .. } => {
                    status.insert(txn, Status::Committed);
                    committed.push(txn);
                }
                EventKind::Abort { .. } => {
                    status.insert(txn, Status::Aborted);
                }
                _ => {}
            }
            push(&mut history, Some(txn), kind);
        }
        if engine.stats().persists != expected_persists {
            return Err(Error::InvalidState("a commit persisted on its own; enlarge the skip list"));
        }
    }
    for (_, c) in clients.drain() {
        drop(c.tx);
        let _ = c.handle.join();
    }
    let final_state = live_state(&engine)?;
    let engine = Arc::try_unwrap(engine).map_err(|_| Error::InvalidState("engine still shared"))?;
    engine.stop_persister();
    drop(engine);
    Ok(RunOutcome { history, programs, committed, final_state, device, config: config.clone() })
}

#[derive(Debug, Clone)]
pub struct ConcurrentSpec {
    pub threads: usize,
    /// Committed transactions to produce in total.
    pub txns: usize,
    pub keys: usize,
    pub max_ops: usize,
    pub seed: u64,
}

impl Default for ConcurrentSpec {
    fn default() -> Self {
        ConcurrentSpec { threads: 4, txns: 1000, keys: 16, max_ops: 4, seed: 0 }
    }
}

pub struct ConcurrentOutcome {
    /// Committed programs and their observed events, in commit order.
    pub committed: Vec<(Vec<ProgOp>, Vec<EventKind>)>,
    pub aborts: u64,
    pub final_state: State,
}

/// Runs random programs from several threads at once, retrying each program
/// after a lock-conflict abort until it commits.
pub fn run_concurrent(engine: &Engine, spec: &ConcurrentSpec) -> Result<ConcurrentOutcome> {
    let per_thread = spec.txns.div_ceil(spec.threads.max(1));
    let results: Vec<Result<(Vec<(u64, Vec<ProgOp>, Vec<EventKind>)>, u64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..spec.threads.max(1))
            .map(|w| {
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut done = Vec::with_capacity(per_thread);
                    let mut aborts = 0u64;
                    for _ in 0..per_thread {
                        let program = random_program(&mut rng, spec.max_ops, spec.keys);
                        loop {
                            let mut t = engine.begin();
                            let mut view = View::new();
                            let mut events = Vec::new();
                            let mut ok = true;
                            for op in &program {
                                match exec_op(&mut t, op, &mut view) {
                                    Ok(e) => events.extend(e),
                                    Err(Error::Aborted) => {
                                        ok = false;
                                        break;
                                    }
                                    Err(e) => return Err(e),
                                }
                            }
                            if ok {
                                match t.commit() {
                                    Ok(info) => {
                                        done.push((info.seq, program.clone(), events));
                                        break;
                                    }
                                    Err(Error::Aborted) => {}
                                    Err(e) => return Err(e),
                                }
                            }
                            aborts += 1;
                            if rng.gen_ratio(1, 4) {
                                std::thread::yield_now();
                            }
                        }
                    }
                    Ok((done, aborts))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut all = Vec::new();
    let mut aborts = 0;
    for r in results {
        let (done, a) = r?;
        all.extend(done);
        aborts += a;
    }
    all.sort_by_key(|(seq, ..)| *seq);
    let committed = all.into_iter().map(|(_, p, e)| (p, e)).collect();
    Ok(ConcurrentOutcome { committed, aborts, final_state: live_state(engine)? })
}
