//! Record and gap lock tables with a no-wait conflict policy.

use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    Shared,
    Exclusive,
}

/// A lockable position: a key, or the sentinel ordered above every key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LockKey {
    Key(Vec<u8>),
    Sentinel,
}

impl LockKey {
    pub fn from_successor(succ: Option<Vec<u8>>) -> LockKey {
        succ.map_or(LockKey::Sentinel, LockKey::Key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockOutcome {
    /// Newly recorded for this holder.
    Granted,
    /// Holder already had a sufficient (or now upgraded) lock.
    Held,
    Conflict,
}

#[derive(Debug)]
struct LockEntry {
    exclusive: bool,
    holders: Vec<u64>,
}

pub struct LockTable {
    shards: Box<[Mutex<HashMap<LockKey, LockEntry>>]>,
}

impl LockTable {
    pub fn new(shards: usize) -> LockTable {
        LockTable { shards: (0..shards.max(1)).map(|_| Mutex::new(HashMap::new())).collect() }
    }

    fn shard(&self, key: &LockKey) -> &Mutex<HashMap<LockKey, LockEntry>> {
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        &self.shards[h.finish() as usize % self.shards.len()]
    }

    pub fn try_lock(&self, key: &LockKey, txn: u64, mode: LockMode) -> LockOutcome {
        let exclusive = mode == LockMode::Exclusive;
        let mut shard = self.shard(key).lock().unwrap();
        match shard.entry(key.clone()) {
            Entry::Vacant(v) => {
                v.insert(LockEntry { exclusive, holders: vec![txn] });
                LockOutcome::Granted
            }
            Entry::Occupied(mut o) => {
                let e = o.get_mut();
                if e.holders.contains(&txn) {
                    if !exclusive || e.exclusive {
                        LockOutcome::Held
                    } else if e.holders.len() == 1 {
                        e.exclusive = true;
                        LockOutcome::Held
                    } else {
                        LockOutcome::Conflict
                    }
                } else if e.exclusive || exclusive {
                    LockOutcome::Conflict
                } else {
                    e.holders.push(txn);
                    LockOutcome::Granted
                }
            }
        }
    }

    pub fn unlock(&self, key: &LockKey, txn: u64) {
        let mut shard = self.shard(key).lock().unwrap();
        if let Entry::Occupied(mut o) = shard.entry(key.clone()) {
            o.get_mut().holders.retain(|&h| h != txn);
            if o.get().holders.is_empty() {
                o.remove();
            }
        }
    }

    pub fn is_locked(&self, key: &LockKey) -> bool {
        self.shard(key).lock().unwrap().contains_key(key)
    }

    pub fn mode(&self, key: &LockKey) -> Option<(LockMode, Vec<u64>)> {
        self.shard(key).lock().unwrap().get(key).map(|e| {
            (if e.exclusive { LockMode::Exclusive } else { LockMode::Shared }, e.holders.clone())
        })
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.lock().unwrap().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LockTableKind {
    Record,
    Gap,
}

pub struct LockTables {
    pub record: LockTable,
    pub gap: LockTable,
}

impl LockTables {
    pub fn new(shards: usize) -> LockTables {
        LockTables { record: LockTable::new(shards), gap: LockTable::new(shards) }
    }

    pub fn table(&self, kind: LockTableKind) -> &LockTable {
        match kind {
            LockTableKind::Record => &self.record,
            LockTableKind::Gap => &self.gap,
        }
    }

    /// Whether any transaction holds a record or gap lock on `key`.
    pub fn key_locked(&self, key: &[u8]) -> bool {
        let k = LockKey::Key(key.to_vec());
        self.record.is_locked(&k) || self.gap.is_locked(&k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> LockKey {
        LockKey::Key(s.as_bytes().to_vec())
    }

    #[test]
    fn compatibility_matrix() {
        let t = LockTable::new(4);
        assert_eq!(t.try_lock(&key("a"), 1, LockMode::Shared), LockOutcome::Granted);
        assert_eq!(t.try_lock(&key("a"), 2, LockMode::Shared), LockOutcome::Granted);
        assert_eq!(t.try_lock(&key("a"), 3, LockMode::Exclusive), LockOutcome::Conflict);
        assert_eq!(t.try_lock(&key("b"), 1, LockMode::Exclusive), LockOutcome::Granted);
        assert_eq!(t.try_lock(&key("b"), 2, LockMode::Shared), LockOutcome::Conflict);
        assert_eq!(t.try_lock(&key("b"), 2, LockMode::Exclusive), LockOutcome::Conflict);
    }

    #[test]
    fn holder_recorded_once() {
        let t = LockTable::new(1);
        assert_eq!(t.try_lock(&key("a"), 1, LockMode::Shared), LockOutcome::Granted);
        assert_eq!(t.try_lock(&key("a"), 1, LockMode::Shared), LockOutcome::Held);
        assert_eq!(t.mode(&key("a")).unwrap().1, vec![1]);
        t.unlock(&key("a"), 1);
        assert!(t.is_empty());
    }

    #[test]
    fn upgrade_only_for_sole_sharer() {
        let t = LockTable::new(2);
        t.try_lock(&key("a"), 1, LockMode::Shared);
        assert_eq!(t.try_lock(&key("a"), 1, LockMode::Exclusive), LockOutcome::Held);
        assert_eq!(t.mode(&key("a")).unwrap().0, LockMode::Exclusive);
        t.try_lock(&key("b"), 1, LockMode::Shared);
        t.try_lock(&key("b"), 2, LockMode::Shared);
        assert_eq!(t.try_lock(&key("b"), 1, LockMode::Exclusive), LockOutcome::Conflict);
    }

    #[test]
    fn exclusive_holder_rereads_without_conflict() {
        let t = LockTable::new(2);
        t.try_lock(&key("a"), 7, LockMode::Exclusive);
        assert_eq!(t.try_lock(&key("a"), 7, LockMode::Shared), LockOutcome::Held);
        assert_eq!(t.mode(&key("a")).unwrap().0, LockMode::Exclusive);
    }

    #[test]
    fn sentinel_orders_above_keys() {
        assert!(LockKey::Sentinel > key("\u{7f}\u{7f}"));
        assert_eq!(LockKey::from_successor(None), LockKey::Sentinel);
    }
}
