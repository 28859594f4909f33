//! Batch merge of the skip list into the tree: partition, coalesce, collect.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::node::{internal_footprint, Internal, Leaf, LeafEntry, Node, NODE_HEADER};
use super::{leaf_of, Index};
use crate::error::Result;
use crate::storage::PAGE_SIZE;

/// Splits entries with the given footprints into the fewest page-sized
/// chunks, balanced so that any larger chunks sit on the right.
pub(crate) fn plan_chunks(footprints: &[usize], max_entries: usize) -> Vec<Range<usize>> {
    let cap = PAGE_SIZE - NODE_HEADER;
    let fits = |bytes: usize, count: usize| bytes <= cap && count <= max_entries;
    let total: usize = footprints.iter().sum();
    if fits(total, footprints.len()) {
        return vec![0..footprints.len()];
    }
    let take_from = |end: usize, target: usize| {
        let (mut bytes, mut start) = (0, end);
        while start > 0 && fits(bytes + footprints[start - 1], end - start + 1) && (start == end || bytes < target) {
            bytes += footprints[start - 1];
            start -= 1;
        }
        (start, bytes)
    };
    let mut needed = 0;
    let mut end = footprints.len();
    while end > 0 {
        end = take_from(end, usize::MAX).0;
        needed += 1;
    }
    let mut chunks = Vec::with_capacity(needed);
    let (mut end, mut remaining, mut left) = (footprints.len(), total, needed);
    while end > 0 {
        let target = if left > 1 { remaining.div_ceil(left) } else { usize::MAX };
        let (start, bytes) = take_from(end, target);
        chunks.push(start..end);
        remaining -= bytes;
        end = start;
        left = left.saturating_sub(1).max(1);
    }
    chunks.reverse();
    chunks
}

fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("worker result")).collect()
}

struct LeafGroup {
    addr: u32,
    node: Arc<Node>,
    route: Box<[u8]>,
    records: Vec<LeafEntry>,
}

struct InternalGroup {
    addr: u32,
    node: Option<Arc<Node>>,
    pointers: Vec<(Box<[u8]>, u32)>,
}

type Pointer = (Box<[u8]>, u32);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub records: usize,
    pub leaves_touched: usize,
    pub nodes_allocated: usize,
    pub tombstones_dropped: usize,
    pub new_roots: usize,
}

fn merge_leaf(
    group: &LeafGroup,
    retain: &(dyn Fn(&[u8]) -> bool + Sync),
    max_entries: usize,
) -> (Vec<Vec<LeafEntry>>, Vec<u32>, usize) {
    let existing = leaf_of(&group.node).entries();
    let mut merged = Vec::with_capacity(existing.len() + group.records.len());
    let mut freed = Vec::new();
    let mut dropped = 0;
    let mut a = existing.into_iter().peekable();
    let mut b = group.records.iter().cloned().peekable();
    loop {
        let next = match (a.peek(), b.peek()) {
            (Some(x), Some(y)) => {
                debug_assert!(x.key != y.key, "key indexed in both list and tree");
                if x.key < y.key {
                    a.next()
                } else {
                    b.next()
                }
            }
            (Some(_), None) => a.next(),
            (None, Some(_)) => b.next(),
            (None, None) => break,
        }
        .unwrap();
        if next.value.is_empty() && !retain(&next.key) {
            dropped += 1;
            if let Some(chain) = &next.chain {
                freed.extend_from_slice(&chain.pages);
            }
            continue;
        }
        merged.push(next);
    }
    let footprints: Vec<usize> = merged.iter().map(LeafEntry::footprint).collect();
    let plan = plan_chunks(&footprints, max_entries);
    let mut chunks = Vec::with_capacity(plan.len());
    let mut rest = merged;
    for range in plan.iter().rev() {
        chunks.push(rest.split_off(range.start));
    }
    chunks.reverse();
    (chunks, freed, dropped)
}

fn merge_internal(group: &InternalGroup, max_entries: usize) -> Vec<(Vec<Option<Box<[u8]>>>, Vec<u32>)> {
    let mut entries: Vec<(Option<Box<[u8]>>, u32)> = match group.node.as_deref() {
        Some(Node::Internal(n)) => n.seps.iter().cloned().zip(n.children.iter().copied()).collect(),
        _ => Vec::new(),
    };
    entries.extend(group.pointers.iter().map(|(k, a)| (Some(k.clone()), *a)));
    entries.sort_by(|x, y| match (&x.0, &y.0) {
        (Some(a), Some(b)) => a.cmp(b),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let footprints: Vec<usize> = entries.iter().map(|(s, _)| internal_footprint(s.as_deref())).collect();
    plan_chunks(&footprints, max_entries)
        .into_iter()
        .map(|r| entries[r].iter().cloned().unzip())
        .collect()
}

impl Index {
    /// Moves every skip-list record into the tree and starts a new epoch.
    ///
    /// Tombstones are physically removed unless `retain` holds for their key.
    /// Must not run concurrently with any other index operation.
    pub fn merge(&self, retain: &(dyn Fn(&[u8]) -> bool + Sync)) -> Result<MergeStats> {
        let list = self.list.swap(Arc::new(super::SkipList::new(self.config.skiplist_capacity)));
        let dirty: Vec<u32> = std::mem::take(&mut *self.dirty_leaves.lock().unwrap());
        let mut stats = MergeStats { records: list.len(), ..MergeStats::default() };
        let result = self.merge_inner(&list, dirty, retain, &mut stats);
        self.epoch.fetch_add(1, Ordering::AcqRel);
        result.map(|()| stats)
    }

    fn merge_inner(
        &self,
        list: &super::SkipList,
        dirty: Vec<u32>,
        retain: &(dyn Fn(&[u8]) -> bool + Sync),
        stats: &mut MergeStats,
    ) -> Result<()> {
        let max_entries = self.config.max_node_entries;
        let workers = self.config.merge_workers;

        // Partition the sorted list by covering leaf.
        let mut groups: Vec<LeafGroup> = Vec::new();
        for (id, key) in list.iter() {
            let entry = LeafEntry { key: key.into(), value: list.value(id), chain: None };
            let (addr, node) = self.find_leaf(key)?;
            match groups.last_mut() {
                Some(last) if last.addr == addr => last.records.push(entry),
                _ => groups.push(LeafGroup { addr, node, route: key.into(), records: vec![entry] }),
            }
        }
        let seen: HashSet<u32> = groups.iter().map(|g| g.addr).collect();
        let mut extra = HashSet::new();
        for addr in dirty {
            if seen.contains(&addr) || !extra.insert(addr) {
                continue;
            }
            let node = self.load(addr)?;
            let Some(route) = leaf_of(&node).keys.first().cloned() else { continue };
            groups.push(LeafGroup { addr, node, route, records: Vec::new() });
        }
        groups.sort_by(|a, b| a.route.cmp(&b.route));
        stats.leaves_touched = groups.len();

        // Coalesce leaves, then collect new-node pointers in key order.
        let outputs = par_map(&groups, workers, |g| merge_leaf(g, retain, max_entries));
        let mut ps = self.persist.lock().unwrap();
        let mut pointers: Vec<Pointer> = Vec::new();
        for (group, (chunks, freed, dropped)) in groups.iter().zip(outputs) {
            stats.tombstones_dropped += dropped;
            for page in freed {
                ps.alloc.free(page);
            }
            let old = leaf_of(&group.node);
            let mut prev = old.prev;
            let last = chunks.len() - 1;
            for (i, chunk) in chunks.into_iter().enumerate() {
                let addr = if i == last { group.addr } else { ps.alloc.alloc()? };
                let max_key = chunk.last().map(|e| e.key.clone());
                let leaf = Leaf::new(chunk, prev);
                if i == last {
                    leaf.persisted_live.store(old.persisted_live.load(Ordering::Acquire), Ordering::Release);
                } else {
                    stats.nodes_allocated += 1;
                    pointers.push((max_key.expect("split chunk is never empty"), addr));
                }
                self.install(addr, Node::Leaf(leaf));
                ps.pending.insert(addr);
                prev = addr;
            }
        }

        // Internal levels, bottom up.
        let mut level = 1;
        while !pointers.is_empty() {
            let height = self.height.load(Ordering::Acquire);
            let mut igroups: Vec<InternalGroup> = Vec::new();
            if level >= height {
                let addr = ps.alloc.alloc()?;
                stats.nodes_allocated += 1;
                stats.new_roots += 1;
                let root = self.root.load(Ordering::Acquire);
                let node = Arc::new(Node::Internal(Internal { seps: vec![None], children: vec![root] }));
                igroups.push(InternalGroup { addr, node: Some(node), pointers: std::mem::take(&mut pointers) });
                self.root.store(addr, Ordering::Release);
                self.height.store(height + 1, Ordering::Release);
            } else {
                for (key, child) in pointers.drain(..) {
                    let parent = self.find_at_depth(&key, height - 1 - level)?;
                    match igroups.last_mut() {
                        Some(g) if g.addr == parent => g.pointers.push((key, child)),
                        _ => {
                            let node = self.load(parent)?;
                            igroups.push(InternalGroup { addr: parent, node: Some(node), pointers: vec![(key, child)] });
                        }
                    }
                }
            }
            let outputs = par_map(&igroups, workers, |g| merge_internal(g, max_entries));
            for (group, chunks) in igroups.iter().zip(outputs) {
                let last = chunks.len() - 1;
                for (i, (seps, children)) in chunks.into_iter().enumerate() {
                    let addr = if i == last { group.addr } else { ps.alloc.alloc()? };
                    if i != last {
                        stats.nodes_allocated += 1;
                        let sep = seps.last().cloned().flatten().expect("left chunk has a bounded separator");
                        pointers.push((sep, addr));
                    }
                    self.install(addr, Node::Internal(Internal { seps, children }));
                    ps.pending.insert(addr);
                }
            }
            level += 1;
        }
        Ok(())
    }
}
