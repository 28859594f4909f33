//! Transactions over the index: strict two-phase locking with record and gap
//! locks, write sets applied at commit, and persists that make everything
//! committed so far durable.

mod locks;
mod protocol;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::index::{Index, IndexConfig, IndexStats, RecordLocation, MAX_KEY, MAX_VALUE};
use crate::shadow::{read_headers, Layout, Shadow, ShadowConfig, ShadowStats, SnapshotEpoch};
use crate::storage::{BlockDevice, FileDevice};

pub use locks::{LockKey, LockMode, LockOutcome, LockTable, LockTableKind, LockTables};
pub use protocol::{ServerPhase, ServerState};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub shadow: ShadowConfig,
    pub index: IndexConfig,
    /// Physical data pages when creating a database; defaults to twice the
    /// logical capacity so every page can have a stable and a current copy.
    pub data_pages: Option<u32>,
    /// Commit returns only once a persist has made the transaction durable.
    pub group_commit: bool,
    /// Starts a background persister with this period.
    pub persist_interval: Option<Duration>,
    pub lock_shards: usize,
    /// Longest sleep between refused server entries.
    pub max_backoff: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            shadow: ShadowConfig::default(),
            index: IndexConfig::default(),
            data_pages: None,
            group_commit: false,
            persist_interval: None,
            lock_shards: 64,
            max_backoff: Duration::from_millis(1),
        }
    }
}

impl EngineConfig {
    /// Device size in pages for a new database.
    pub fn device_pages(&self) -> u32 {
        let logical = self.shadow.logical_capacity;
        let data = self.data_pages.unwrap_or_else(|| logical.saturating_mul(2).saturating_add(64));
        Layout::required_capacity(logical, self.shadow.delta_region_pages, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    Running,
    Observing,
    Committing,
    Aborted,
    Committed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitInfo {
    /// Global commit order.
    pub seq: u64,
    /// Snapshot epoch current at commit; the transaction is durable once the
    /// durable epoch exceeds it.
    pub epoch: SnapshotEpoch,
}

#[derive(Debug, Clone, Default)]
pub struct EngineStats {
    pub shadow: ShadowStats,
    pub index: IndexStats,
    pub commits: u64,
    pub aborts: u64,
    pub persists: u64,
    pub record_locks: usize,
    pub gap_locks: usize,
}

struct Inner {
    index: Index,
    locks: LockTables,
    server: ServerState,
    config: EngineConfig,
    next_txn: AtomicU64,
    commit_seq: AtomicU64,
    aborts: AtomicU64,
    persists: AtomicU64,
    poisoned: AtomicBool,
    durable: Mutex<u64>,
    durable_cv: Condvar,
}

pub struct Engine {
    inner: Arc<Inner>,
    persister: Mutex<Option<(Arc<(Mutex<bool>, Condvar)>, JoinHandle<()>)>>,
}

impl Engine {
    /// Opens (recovering, or formatting if blank) a database on `device`.
    pub fn open(device: Arc<dyn BlockDevice>, config: EngineConfig) -> Result<Engine> {
        let shadow = Arc::new(Shadow::open(device, &config.shadow)?);
        let durable = shadow.epoch().0;
        let index = Index::open(shadow, config.index.clone())?;
        let inner = Arc::new(Inner {
            index,
            locks: LockTables::new(config.lock_shards),
            server: ServerState::new(),
            next_txn: AtomicU64::new(1),
            commit_seq: AtomicU64::new(0),
            aborts: AtomicU64::new(0),
            persists: AtomicU64::new(0),
            poisoned: AtomicBool::new(false),
            durable: Mutex::new(durable),
            durable_cv: Condvar::new(),
            config,
        });
        let engine = Engine { inner, persister: Mutex::new(None) };
        if let Some(period) = engine.inner.config.persist_interval {
            engine.start_persister(period);
        }
        Ok(engine)
    }

    /// Opens a database file, creating it with `config`'s geometry if needed.
    /// An existing file keeps the geometry recorded in its header.
    pub fn open_path(path: impl AsRef<Path>, config: EngineConfig) -> Result<Engine> {
        let probe = FileDevice::open(path.as_ref(), 2)?;
        let headers = read_headers(&probe)?;
        let capacity = headers.iter().flatten().map(|h| h.capacity).max().unwrap_or_else(|| config.device_pages());
        drop(probe);
        Engine::open(Arc::new(FileDevice::open(path, capacity)?), config)
    }

    pub fn begin(&self) -> Transaction {
        let mut t = Transaction {
            inner: self.inner.clone(),
            id: 0,
            begin_epoch: 0,
            write_set: BTreeMap::new(),
            held: Vec::new(),
            state: ClientState::Committed,
        };
        t.begin().expect("fresh transaction");
        t
    }

    /// Makes every transaction committed before this call durable.
    pub fn persist(&self) -> Result<SnapshotEpoch> {
        self.inner.persist()
    }

    pub fn epoch(&self) -> SnapshotEpoch {
        self.inner.index.shadow().epoch()
    }

    pub fn index(&self) -> &Index {
        &self.inner.index
    }

    pub fn locks(&self) -> &LockTables {
        &self.inner.locks
    }

    pub fn server(&self) -> &ServerState {
        &self.inner.server
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    pub fn stats(&self) -> EngineStats {
        let inner = &self.inner;
        EngineStats {
            shadow: inner.index.shadow().stats(),
            index: inner.index.stats(),
            commits: inner.commit_seq.load(Ordering::Acquire),
            aborts: inner.aborts.load(Ordering::Acquire),
            persists: inner.persists.load(Ordering::Acquire),
            record_locks: inner.locks.record.len(),
            gap_locks: inner.locks.gap.len(),
        }
    }

    /// Blocks until the given commit is covered by a completed persist.
    pub fn wait_durable(&self, info: CommitInfo) {
        self.inner.wait_durable(info.epoch.0);
    }

    pub fn start_persister(&self, period: Duration) {
        let mut slot = self.persister.lock().unwrap();
        if slot.is_some() {
            return;
        }
        let stop = Arc::new((Mutex::new(false), Condvar::new()));
        let inner = self.inner.clone();
        let stop2 = stop.clone();
        let handle = std::thread::Builder::new()
            .name("weakkv-persister".into())
            .spawn(move || {
                let (flag, cv) = &*stop2;
                let mut stopped = flag.lock().unwrap();
                loop {
                    stopped = cv.wait_timeout(stopped, period).unwrap().0;
                    if *stopped {
                        break;
                    }
                    drop(stopped);
                    if let Err(e) = inner.persist() {
                        log::warn!("background persist failed: {e}");
                    }
                    stopped = flag.lock().unwrap();
                }
            })
            .expect("spawn persister");
        *slot = Some((stop, handle));
    }

    pub fn stop_persister(&self) {
        if let Some((stop, handle)) = self.persister.lock().unwrap().take() {
            *stop.0.lock().unwrap() = true;
            stop.1.notify_all();
            let _ = handle.join();
        }
    }

    /// Stops the persister and persists once more.
    pub fn close(self) -> Result<SnapshotEpoch> {
        self.stop_persister();
        self.inner.persist()
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.stop_persister();
    }
}

impl Inner {
    fn check_usable(&self) -> Result<()> {
        if self.poisoned.load(Ordering::Acquire) {
            return Err(Error::InvalidState("engine poisoned by a failed merge; reopen to recover"));
        }
        Ok(())
    }

    fn enter(&self) -> Result<()> {
        self.check_usable()?;
        let mut backoff = Duration::from_micros(1);
        while !self.server.enter() {
            std::thread::sleep(backoff);
            backoff = (backoff * 2).min(self.config.max_backoff);
        }
        Ok(())
    }

    fn persist(&self) -> Result<SnapshotEpoch> {
        self.check_usable()?;
        self.server.persist(|| self.do_persist())
    }

    fn do_persist(&self) -> Result<SnapshotEpoch> {
        let index = &self.index;
        let locks = &self.locks;
        if let Err(e) = index.merge(&|key: &[u8]| locks.key_locked(key)) {
            self.poisoned.store(true, Ordering::Release);
            return Err(e);
        }
        index.checkpoint()?;
        let epoch = index.shadow().flush()?;
        index.evict();
        self.persists.fetch_add(1, Ordering::AcqRel);
        *self.durable.lock().unwrap() = epoch.0;
        self.durable_cv.notify_all();
        Ok(epoch)
    }

    fn wait_durable(&self, epoch: u64) {
        let mut durable = self.durable.lock().unwrap();
        while *durable <= epoch {
            durable = self.durable_cv.wait(durable).unwrap();
        }
    }
}

/// Per-key buffered write: the value (empty for delete) and where the key
/// was found when first written.
#[derive(Debug, Clone)]
struct WriteEntry {
    value: Vec<u8>,
    location: RecordLocation,
}

pub struct Transaction {
    inner: Arc<Inner>,
    id: u64,
    begin_epoch: u64,
    write_set: BTreeMap<Vec<u8>, WriteEntry>,
    held: Vec<(LockTableKind, LockKey)>,
    state: ClientState,
}

fn validate_key(key: &[u8]) -> Result<()> {
    if key.is_empty() || key.len() > MAX_KEY {
        return Err(Error::InvalidArgument(format!("key length {} outside 1..={MAX_KEY}", key.len())));
    }
    Ok(())
}

impl Transaction {
    /// Restarts a finished transaction object as a new transaction.
    pub fn begin(&mut self) -> Result<()> {
        if self.is_active() {
            return Err(Error::InvalidState("transaction already active"));
        }
        self.id = self.inner.next_txn.fetch_add(1, Ordering::AcqRel);
        self.begin_epoch = self.inner.index.epoch();
        self.write_set.clear();
        self.held.clear();
        self.state = ClientState::Running;
        Ok(())
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> ClientState {
        self.state
    }

    pub fn is_active(&self) -> bool {
        matches!(self.state, ClientState::Running | ClientState::Observing | ClientState::Committing)
    }

    /// Index structure version captured at begin.
    pub fn begin_epoch(&self) -> u64 {
        self.begin_epoch
    }

    pub fn write_set_len(&self) -> usize {
        self.write_set.len()
    }

    /// Location tag recorded for a buffered write.
    pub fn write_location(&self, key: &[u8]) -> Option<RecordLocation> {
        self.write_set.get(key).map(|e| e.location)
    }

    fn check_active(&self) -> Result<()> {
        if self.state != ClientState::Running {
            return Err(Error::InvalidState("transaction is not active"));
        }
        Ok(())
    }

    fn enter(&mut self) -> Result<()> {
        self.inner.enter()?;
        self.state = ClientState::Observing;
        Ok(())
    }

    fn leave(&mut self) {
        self.inner.server.leave();
        if self.state == ClientState::Observing {
            self.state = ClientState::Running;
        }
    }

    fn lock(&mut self, kind: LockTableKind, key: LockKey, mode: LockMode) -> Result<()> {
        match self.inner.locks.table(kind).try_lock(&key, self.id, mode) {
            LockOutcome::Granted => {
                self.held.push((kind, key));
                Ok(())
            }
            LockOutcome::Held => Ok(()),
            LockOutcome::Conflict => Err(Error::Aborted),
        }
    }

    /// Runs `f` inside the server. A lock conflict aborts the transaction.
    fn inside<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.check_active()?;
        self.enter()?;
        let r = f(self);
        self.leave();
        if let Err(e) = &r {
            if matches!(e, Error::Aborted) {
                self.abort_inner();
            }
        }
        r
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.check_active()?;
        validate_key(key)?;
        if let Some(e) = self.write_set.get(key) {
            return Ok((!e.value.is_empty()).then(|| e.value.clone()));
        }
        self.inside(|t| {
            t.lock(LockTableKind::Record, LockKey::Key(key.to_vec()), LockMode::Shared)?;
            Ok(t.inner.index.search(key)?.and_then(|(v, _)| (!v.is_empty()).then(|| (*v).clone())))
        })
    }

    /// Records with keys in `[k1, k2]`, including this transaction's own
    /// uncommitted writes.
    pub fn getrange(&mut self, k1: &[u8], k2: &[u8]) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.check_active()?;
        validate_key(k1)?;
        validate_key(k2)?;
        if k1 > k2 {
            return Err(Error::InvalidArgument("range start exceeds range end".into()));
        }
        let found = self.inside(|t| {
            let mut previous: Option<(Vec<Vec<u8>>, Option<Vec<u8>>)> = None;
            loop {
                let r = t.inner.index.range(k1, k2)?;
                let keys: Vec<Vec<u8>> = r.records.iter().map(|rec| rec.key.clone()).collect();
                if previous.as_ref().is_some_and(|(k, s)| *k == keys && *s == r.successor) {
                    return Ok(r.records);
                }
                t.lock(LockTableKind::Gap, LockKey::from_successor(r.successor.clone()), LockMode::Shared)?;
                for key in &keys {
                    t.lock(LockTableKind::Gap, LockKey::Key(key.clone()), LockMode::Shared)?;
                    t.lock(LockTableKind::Record, LockKey::Key(key.clone()), LockMode::Shared)?;
                }
                previous = Some((keys, r.successor));
            }
        })?;
        let mut out: BTreeMap<Vec<u8>, Vec<u8>> =
            found.into_iter().map(|rec| (rec.key, (*rec.value).clone())).collect();
        for (k, e) in self.write_set.range(k1.to_vec()..=k2.to_vec()) {
            out.insert(k.clone(), e.value.clone());
        }
        Ok(out.into_iter().filter(|(_, v)| !v.is_empty()).collect())
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<()> {
        self.check_active()?;
        validate_key(key)?;
        if value.is_empty() || value.len() > MAX_VALUE {
            return Err(Error::InvalidArgument(format!("value length {} outside 1..={MAX_VALUE}", value.len())));
        }
        if let Some(e) = self.write_set.get_mut(key) {
            e.value = value.to_vec();
            return Ok(());
        }
        let location = self.inside(|t| {
            t.lock(LockTableKind::Record, LockKey::Key(key.to_vec()), LockMode::Exclusive)?;
            t.locate_for_write(key)
        })?;
        self.write_set.insert(key.to_vec(), WriteEntry { value: value.to_vec(), location });
        Ok(())
    }

    /// Finds `key` for writing; when absent, locks the gap it would enter.
    fn locate_for_write(&mut self, key: &[u8]) -> Result<RecordLocation> {
        let mut locked: Option<LockKey> = None;
        loop {
            if let Some((_, loc)) = self.inner.index.search(key)? {
                return Ok(loc);
            }
            let succ = LockKey::from_successor(self.inner.index.range(key, key)?.successor);
            if locked.as_ref() == Some(&succ) {
                return Ok(RecordLocation::None);
            }
            self.lock(LockTableKind::Gap, succ.clone(), LockMode::Exclusive)?;
            locked = Some(succ);
        }
    }

    pub fn delete(&mut self, key: &[u8]) -> Result<()> {
        self.check_active()?;
        validate_key(key)?;
        if let Some(e) = self.write_set.get_mut(key) {
            if e.location == RecordLocation::None {
                self.write_set.remove(key);
            } else {
                e.value.clear();
            }
            return Ok(());
        }
        let found = self.inside(|t| {
            t.lock(LockTableKind::Record, LockKey::Key(key.to_vec()), LockMode::Exclusive)?;
            Ok(t.inner.index.search(key)?.filter(|(v, _)| !v.is_empty()).map(|(_, loc)| loc))
        })?;
        if let Some(location) = found {
            self.write_set.insert(key.to_vec(), WriteEntry { value: Vec::new(), location });
        }
        Ok(())
    }

    /// Applies the write set and releases all locks. Durable only after the
    /// next persist completes (immediately waited for in group-commit mode).
    pub fn commit(&mut self) -> Result<CommitInfo> {
        self.check_active()?;
        let inner = self.inner.clone();
        let new_keys = self.write_set.values().filter(|e| e.location == RecordLocation::None).count() as u32;
        self.enter()?;
        if new_keys > 0 {
            while !inner.index.reserve(new_keys) {
                self.leave();
                if let Err(e) = inner.persist() {
                    self.abort_inner();
                    return Err(e);
                }
                self.enter()?;
            }
        }
        self.state = ClientState::Committing;
        let applied = self.apply(&inner);
        let info = CommitInfo {
            seq: inner.commit_seq.fetch_add(1, Ordering::AcqRel),
            epoch: inner.index.shadow().epoch(),
        };
        self.release_locks();
        self.write_set.clear();
        inner.server.leave();
        if let Err(e) = applied {
            // Only storage failures reach here; the index may be partially
            // updated, so the engine must be reopened.
            inner.poisoned.store(true, Ordering::Release);
            self.state = ClientState::Aborted;
            return Err(e);
        }
        self.state = ClientState::Committed;
        if inner.config.group_commit {
            inner.wait_durable(info.epoch.0);
        }
        Ok(info)
    }

    fn apply(&self, inner: &Inner) -> Result<()> {
        let index = &inner.index;
        let current = index.epoch();
        for (key, e) in &self.write_set {
            let mut loc = e.location;
            if loc != RecordLocation::None && (self.begin_epoch != current || loc.epoch() != Some(current)) {
                // The tree was restructured since the location was taken.
                loc = index.search(key)?.map_or(RecordLocation::None, |(_, l)| l);
            }
            match loc {
                RecordLocation::None => {
                    if e.value.is_empty() {
                        continue;
                    }
                    if e.location != RecordLocation::None {
                        // Reserved slots only cover keys that were absent at put.
                        index.insert(key, e.value.clone())?;
                    } else {
                        index.insert_reserved(key, e.value.clone())?;
                    }
                }
                loc => index.update(loc, e.value.clone())?,
            }
        }
        Ok(())
    }

    fn release_locks(&mut self) {
        for (kind, key) in self.held.drain(..) {
            self.inner.locks.table(kind).unlock(&key, self.id);
        }
    }

    fn abort_inner(&mut self) {
        self.release_locks();
        self.write_set.clear();
        self.state = ClientState::Aborted;
        self.inner.aborts.fetch_add(1, Ordering::AcqRel);
    }

    pub fn abort(&mut self) -> Result<()> {
        self.check_active()?;
        self.abort_inner();
        Ok(())
    }
}

impl Drop for Transaction {
    fn drop(&mut self) {
        if self.is_active() {
            self.abort_inner();
        }
    }
}
