//! Insert-only lock-free skip list over a fixed-capacity node arena.
//!
//! Nodes are addressed by `u32` ids into lazily allocated arena chunks, so a
//! node id stays valid for the life of the list. Keys are immutable once
//! linked; values live in atomically swappable slots. There is no removal:
//! the whole list is discarded when its contents are merged into the tree.

use std::cmp::Ordering as CmpOrdering;
use std::sync::atomic::{AtomicU32, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use arc_swap::ArcSwapOption;
use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_HEIGHT: usize = 20;
const CHUNK_BITS: u32 = 12;
const CHUNK_LEN: usize = 1 << CHUNK_BITS;
const NIL: u32 = 0;
const HEAD: u32 = u32::MAX;

struct ListNode {
    key: OnceLock<Box<[u8]>>,
    value: ArcSwapOption<Vec<u8>>,
    height: AtomicU8,
    next: [AtomicU32; MAX_HEIGHT],
}

impl ListNode {
    fn empty() -> ListNode {
        ListNode {
            key: OnceLock::new(),
            value: ArcSwapOption::empty(),
            height: AtomicU8::new(0),
            next: std::array::from_fn(|_| AtomicU32::new(NIL)),
        }
    }

    fn key(&self) -> &[u8] {
        self.key.get().expect("linked node without key")
    }
}

pub struct SkipList {
    head: [AtomicU32; MAX_HEIGHT],
    chunks: Box<[OnceLock<Box<[ListNode]>>]>,
    capacity: u32,
    allocated: AtomicU32,
    reserved: AtomicU32,
    len: AtomicUsize,
}

/// Random tower height: geometric with p = 1/2, capped at `MAX_HEIGHT`.
fn random_height() -> usize {
    let bits: u32 = rand::thread_rng().gen();
    ((bits.trailing_ones() as usize) + 1).min(MAX_HEIGHT)
}

impl SkipList {
    pub fn new(capacity: u32) -> SkipList {
        let capacity = capacity.min(HEAD - 1);
        let chunk_count = (capacity as usize + 1).div_ceil(CHUNK_LEN);
        SkipList {
            head: std::array::from_fn(|_| AtomicU32::new(NIL)),
            chunks: (0..chunk_count).map(|_| OnceLock::new()).collect(),
            capacity,
            allocated: AtomicU32::new(0),
            reserved: AtomicU32::new(0),
            len: AtomicUsize::new(0),
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slots neither used nor reserved.
    pub fn available(&self) -> u32 {
        self.capacity - self.reserved.load(Ordering::Acquire)
    }

    fn node(&self, id: u32) -> &ListNode {
        debug_assert!(id != NIL && id != HEAD);
        let chunk = self.chunks[(id >> CHUNK_BITS) as usize]
            .get_or_init(|| (0..CHUNK_LEN).map(|_| ListNode::empty()).collect());
        &chunk[(id as usize) & (CHUNK_LEN - 1)]
    }

    fn link(&self, from: u32, level: usize) -> &AtomicU32 {
        if from == HEAD {
            &self.head[level]
        } else {
            &self.node(from).next[level]
        }
    }

    /// Reserves `n` slots for later [`SkipList::insert_reserved`] calls.
    pub fn try_reserve(&self, n: u32) -> bool {
        self.reserved
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |r| r.checked_add(n).filter(|&t| t <= self.capacity))
            .is_ok()
    }

    /// Fills `preds`/`succs` for `key` on every level; returns whether the key
    /// is present at level 0.
    fn find(&self, key: &[u8], preds: &mut [u32; MAX_HEIGHT], succs: &mut [u32; MAX_HEIGHT]) -> bool {
        let mut pred = HEAD;
        for level in (0..MAX_HEIGHT).rev() {
            let mut cur = self.link(pred, level).load(Ordering::Acquire);
            while cur != NIL && self.node(cur).key() < key {
                pred = cur;
                cur = self.link(cur, level).load(Ordering::Acquire);
            }
            preds[level] = pred;
            succs[level] = cur;
        }
        succs[0] != NIL && self.node(succs[0]).key() == key
    }

    /// Inserts a key that is not yet present, consuming one free slot.
    pub fn insert(&self, key: &[u8], value: Vec<u8>) -> Result<u32> {
        if !self.try_reserve(1) {
            return Err(Error::SkipListFull);
        }
        self.insert_reserved(key, value)
    }

    /// Inserts using a slot previously obtained from [`SkipList::try_reserve`].
    pub fn insert_reserved(&self, key: &[u8], value: Vec<u8>) -> Result<u32> {
        let id = self.allocated.fetch_add(1, Ordering::AcqRel) + 1;
        if id > self.capacity {
            return Err(Error::SkipListFull);
        }
        let node = self.node(id);
        node.key.set(key.into()).expect("arena slot reused");
        node.value.store(Some(Arc::new(value)));
        let height = random_height();
        node.height.store(height as u8, Ordering::Release);

        let mut preds = [HEAD; MAX_HEIGHT];
        let mut succs = [NIL; MAX_HEIGHT];
        loop {
            if self.find(key, &mut preds, &mut succs) {
                return Err(Error::DuplicateKey);
            }
            for (level, succ) in succs.iter().enumerate().take(height) {
                node.next[level].store(*succ, Ordering::Release);
            }
            if self.link(preds[0], 0).compare_exchange(succs[0], id, Ordering::AcqRel, Ordering::Acquire).is_ok() {
                break;
            }
        }
        for level in 1..height {
            loop {
                node.next[level].store(succs[level], Ordering::Release);
                let cas =
                    self.link(preds[level], level).compare_exchange(succs[level], id, Ordering::AcqRel, Ordering::Acquire);
                if cas.is_ok() {
                    break;
                }
                self.find(key, &mut preds, &mut succs);
            }
        }
        self.len.fetch_add(1, Ordering::AcqRel);
        Ok(id)
    }

    pub fn get(&self, key: &[u8]) -> Option<(u32, Arc<Vec<u8>>)> {
        let mut pred = HEAD;
        for level in (0..MAX_HEIGHT).rev() {
            let mut cur = self.link(pred, level).load(Ordering::Acquire);
            while cur != NIL {
                match self.node(cur).key().cmp(key) {
                    CmpOrdering::Less => {
                        pred = cur;
                        cur = self.link(cur, level).load(Ordering::Acquire);
                    }
                    CmpOrdering::Equal => return Some((cur, self.value(cur))),
                    CmpOrdering::Greater => break,
                }
            }
        }
        None
    }

    pub fn key(&self, id: u32) -> &[u8] {
        self.node(id).key()
    }

    pub fn value(&self, id: u32) -> Arc<Vec<u8>> {
        self.node(id).value.load_full().expect("linked node without value")
    }

    pub fn set_value(&self, id: u32, value: Vec<u8>) {
        assert!(id != NIL && id <= self.allocated.load(Ordering::Acquire).min(self.capacity));
        self.node(id).value.store(Some(Arc::new(value)));
    }

    /// Level-0 iteration starting at the first key `>= from`.
    pub fn iter_from<'a>(&'a self, from: &[u8]) -> Iter<'a> {
        let mut preds = [HEAD; MAX_HEIGHT];
        let mut succs = [NIL; MAX_HEIGHT];
        self.find(from, &mut preds, &mut succs);
        Iter { list: self, cur: succs[0] }
    }

    pub fn iter(&self) -> Iter<'_> {
        Iter { list: self, cur: self.head[0].load(Ordering::Acquire) }
    }

    /// Checks level ordering and that every tower member is present on the
    /// levels below it.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let level0: Vec<u32> = self.iter().map(|(id, _)| id).collect();
        for pair in level0.windows(2) {
            if self.key(pair[0]) >= self.key(pair[1]) {
                return Err(format!("level 0 not strictly increasing at node {}", pair[1]));
            }
        }
        let mut below: std::collections::HashSet<u32> = level0.iter().copied().collect();
        for level in 1..MAX_HEIGHT {
            let mut here = std::collections::HashSet::new();
            let mut cur = self.head[level].load(Ordering::Acquire);
            let mut last: Option<&[u8]> = None;
            while cur != NIL {
                if !below.contains(&cur) {
                    return Err(format!("node {cur} on level {level} missing below"));
                }
                if (self.node(cur).height.load(Ordering::Acquire) as usize) <= level {
                    return Err(format!("node {cur} linked above its height"));
                }
                let k = self.key(cur);
                if last.is_some_and(|l| l >= k) {
                    return Err(format!("level {level} not increasing"));
                }
                last = Some(k);
                here.insert(cur);
                cur = self.node(cur).next[level].load(Ordering::Acquire);
            }
            below = here;
        }
        if level0.len() != self.len() {
            return Err(format!("len {} but {} linked nodes", self.len(), level0.len()));
        }
        Ok(())
    }
}

pub struct Iter<'a> {
    list: &'a SkipList,
    cur: u32,
}

impl<'a> Iterator for Iter<'a> {
    type Item = (u32, &'a [u8]);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cur == NIL {
            return None;
        }
        let id = self.cur;
        let node = self.list.node(id);
        self.cur = node.next[0].load(Ordering::Acquire);
        Some((id, node.key()))
    }
}
