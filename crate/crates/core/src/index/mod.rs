//! Two-level index: a lock-free skip list absorbing new keys in front of a
//! B+-tree stored in shadow logical pages.
//!
//! The tree is only restructured by [`Index::merge`], which callers run while
//! no other index operation is in flight. Between merges the tree's shape is
//! frozen, so readers descend without latches and updates overwrite value
//! slots in place.

mod merge;
mod node;
mod skiplist;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use arc_swap::{ArcSwap, ArcSwapOption};

use crate::checksum::Checksummer;
use crate::error::{Error, Result};
use crate::shadow::{LogicalAddr, Shadow};
use crate::storage::{Page, PAGE_SIZE};

pub use merge::MergeStats;
pub use node::{MAX_KEY, MAX_VALUE};
pub use skiplist::SkipList;

use node::{Body, Internal, Leaf, LeafEntry, Node, OverflowChain, RawBody, RawNode};

const META_MAGIC: &[u8; 8] = b"WKVTREE\0";
const META_VERSION: u32 = 1;
const BITS_PER_PAGE: u32 = (PAGE_SIZE * 8) as u32;
const WORDS_PER_PAGE: usize = PAGE_SIZE / 8;
const TABLE_CHUNK: usize = 1024;

#[derive(Debug, Clone)]
pub struct IndexConfig {
    pub skiplist_capacity: u32,
    /// Upper bound on coalescing threads during a merge.
    pub merge_workers: usize,
    /// Entry cap per node on top of the page-size limit; testing aid.
    pub max_node_entries: usize,
    /// Clean leaves beyond this many cached bytes are dropped after a checkpoint.
    pub cache_bytes: Option<usize>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig { skiplist_capacity: 1 << 20, merge_workers: 1, max_node_entries: usize::MAX, cache_bytes: None }
    }
}

/// Where a record was found; valid only during the epoch it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordLocation {
    List { node: u32, epoch: u64 },
    Tree { leaf: LogicalAddr, slot: u32, epoch: u64 },
    None,
}

impl RecordLocation {
    pub fn epoch(&self) -> Option<u64> {
        match *self {
            RecordLocation::List { epoch, .. } | RecordLocation::Tree { epoch, .. } => Some(epoch),
            RecordLocation::None => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RangeRecord {
    pub key: Vec<u8>,
    pub value: Arc<Vec<u8>>,
    pub location: RecordLocation,
}

#[derive(Debug, Clone, Default)]
pub struct RangeResult {
    pub records: Vec<RangeRecord>,
    /// Smallest indexed key `>= k2`; `None` stands for the end sentinel.
    pub successor: Option<Vec<u8>>,
}

/// Explicit tree shape, used to build and compare trees in tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeLayout {
    Leaf(Vec<(Vec<u8>, Vec<u8>)>),
    Internal(Vec<(Option<Vec<u8>>, TreeLayout)>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TreeReport {
    pub height: u32,
    pub leaves: usize,
    pub internals: usize,
    pub records: usize,
    pub tombstones: usize,
    pub oversized_leaves: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IndexStats {
    pub epoch: u64,
    pub height: u32,
    pub root: u32,
    pub list_len: usize,
    pub list_capacity: u32,
    pub persisted_records: u64,
    pub allocated_pages: u32,
    pub cached_nodes: usize,
    pub cached_bytes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckpointStats {
    pub nodes_written: usize,
    pub overflow_pages_written: usize,
    pub bitmap_pages_written: usize,
}

struct NodeTable {
    chunks: Box<[OnceLock<Box<[ArcSwapOption<Node>]>>]>,
}

impl NodeTable {
    fn new(capacity: u32) -> NodeTable {
        NodeTable { chunks: (0..(capacity as usize).div_ceil(TABLE_CHUNK)).map(|_| OnceLock::new()).collect() }
    }

    fn slot(&self, addr: u32) -> &ArcSwapOption<Node> {
        let chunk = self.chunks[addr as usize / TABLE_CHUNK]
            .get_or_init(|| (0..TABLE_CHUNK).map(|_| ArcSwapOption::empty()).collect());
        &chunk[addr as usize % TABLE_CHUNK]
    }

    fn cached(&self) -> impl Iterator<Item = (u32, Arc<Node>)> + '_ {
        self.chunks.iter().enumerate().filter_map(|(c, chunk)| chunk.get().map(|s| (c, s))).flat_map(|(c, slots)| {
            slots.iter().enumerate().filter_map(move |(i, s)| s.load_full().map(|n| ((c * TABLE_CHUNK + i) as u32, n)))
        })
    }
}

/// Logical page allocator, persisted as a bitmap (set bit = in use).
struct LogicalAlloc {
    words: Vec<u64>,
    capacity: u32,
    cursor: u32,
    used: u32,
    dirty_pages: BTreeSet<u32>,
}

impl LogicalAlloc {
    fn new(capacity: u32) -> LogicalAlloc {
        let pages = capacity.div_ceil(BITS_PER_PAGE);
        LogicalAlloc {
            words: vec![0; pages as usize * WORDS_PER_PAGE],
            capacity,
            cursor: 0,
            used: 0,
            dirty_pages: (0..pages).collect(),
        }
    }

    fn bitmap_pages(&self) -> u32 {
        self.capacity.div_ceil(BITS_PER_PAGE)
    }

    fn is_used(&self, addr: u32) -> bool {
        self.words[addr as usize / 64] & (1 << (addr % 64)) != 0
    }

    fn mark(&mut self, addr: u32) {
        debug_assert!(!self.is_used(addr));
        self.words[addr as usize / 64] |= 1 << (addr % 64);
        self.used += 1;
        self.dirty_pages.insert(addr / BITS_PER_PAGE);
    }

    fn free(&mut self, addr: u32) {
        debug_assert!(self.is_used(addr));
        self.words[addr as usize / 64] &= !(1 << (addr % 64));
        self.used -= 1;
        self.dirty_pages.insert(addr / BITS_PER_PAGE);
    }

    fn alloc(&mut self) -> Result<u32> {
        if self.used >= self.capacity {
            return Err(Error::LogicalSpaceFull);
        }
        let words = self.capacity.div_ceil(64) as usize;
        let start = self.cursor as usize / 64;
        for step in 0..=words {
            let w = (start + step) % words;
            let free = !self.words[w];
            if free == 0 {
                continue;
            }
            let addr = (w * 64) as u32 + free.trailing_zeros();
            if addr >= self.capacity {
                continue;
            }
            self.mark(addr);
            self.cursor = addr + 1;
            return Ok(addr);
        }
        Err(Error::LogicalSpaceFull)
    }

    fn page_bytes(&self, page: u32) -> Page {
        let mut out = Page::zeroed();
        let words = &self.words[page as usize * WORDS_PER_PAGE..(page as usize + 1) * WORDS_PER_PAGE];
        for (i, w) in words.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    fn load_page(&mut self, page: u32, bytes: &[u8]) {
        for i in 0..WORDS_PER_PAGE {
            let w = u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
            self.used += w.count_ones();
            self.words[page as usize * WORDS_PER_PAGE + i] = w;
        }
    }
}

struct PersistState {
    alloc: LogicalAlloc,
    record_count: u64,
    /// Nodes to be written by the next checkpoint.
    pending: BTreeSet<u32>,
}

pub struct Index {
    shadow: Arc<Shadow>,
    config: IndexConfig,
    list: ArcSwap<SkipList>,
    nodes: NodeTable,
    root: AtomicU32,
    height: AtomicU32,
    epoch: AtomicU64,
    dirty_leaves: Mutex<Vec<u32>>,
    persist: Mutex<PersistState>,
    meta_dirty: AtomicBool,
}

pub(crate) fn leaf_of(node: &Node) -> &Leaf {
    match node {
        Node::Leaf(l) => l,
        Node::Internal(_) => panic!("expected a leaf node"),
    }
}

fn validate(key: &[u8], value: &[u8]) -> Result<()> {
    if key.is_empty() || key.len() > MAX_KEY {
        return Err(Error::InvalidArgument(format!("key length {} outside 1..={MAX_KEY}", key.len())));
    }
    if value.len() > MAX_VALUE {
        return Err(Error::InvalidArgument(format!("value length {} exceeds {MAX_VALUE}", value.len())));
    }
    Ok(())
}

impl Index {
    /// Loads the tree rooted in logical page 0, or lays out an empty one.
    pub fn open(shadow: Arc<Shadow>, config: IndexConfig) -> Result<Index> {
        let capacity = shadow.logical_capacity();
        let mut alloc = LogicalAlloc::new(capacity);
        let meta = shadow.read(LogicalAddr(0))?;
        let index = |alloc, root, height, record_count, pending| Index {
            list: ArcSwap::from_pointee(SkipList::new(config.skiplist_capacity)),
            nodes: NodeTable::new(capacity),
            root: AtomicU32::new(root),
            height: AtomicU32::new(height),
            epoch: AtomicU64::new(shadow.epoch().0),
            dirty_leaves: Mutex::new(Vec::new()),
            persist: Mutex::new(PersistState { alloc, record_count, pending }),
            meta_dirty: AtomicBool::new(false),
            shadow: shadow.clone(),
            config: config.clone(),
        };
        if meta.is_zero() {
            let reserved = 1 + alloc.bitmap_pages();
            if reserved + 1 > capacity {
                return Err(Error::InvalidArgument(format!("logical capacity {capacity} too small for a tree")));
            }
            for addr in 0..reserved {
                alloc.mark(addr);
            }
            let root = alloc.alloc()?;
            let idx = index(alloc, root, 1, 0, BTreeSet::from([root]));
            idx.install(root, Node::Leaf(Leaf::new(Vec::new(), 0)));
            idx.meta_dirty.store(true, Ordering::Release);
            return Ok(idx);
        }
        if &meta[0..8] != META_MAGIC {
            return Err(Error::Corrupt("tree meta page has bad magic".into()));
        }
        let field = |at: usize| u32::from_le_bytes(meta[at..at + 4].try_into().unwrap());
        if field(8) != META_VERSION {
            return Err(Error::Corrupt(format!("unsupported tree version {}", field(8))));
        }
        let (root, height, bitmap_pages, stored_capacity) = (field(12), field(16), field(20), field(24));
        let record_count = u64::from_le_bytes(meta[32..40].try_into().unwrap());
        if stored_capacity != capacity || bitmap_pages != alloc.bitmap_pages() || root >= capacity || height == 0 {
            return Err(Error::Corrupt("tree meta page disagrees with shadow geometry".into()));
        }
        alloc.dirty_pages.clear();
        for p in 0..bitmap_pages {
            alloc.load_page(p, &shadow.read(LogicalAddr(1 + p))?);
        }
        Ok(index(alloc, root, height, record_count, BTreeSet::new()))
    }

    pub fn shadow(&self) -> &Arc<Shadow> {
        &self.shadow
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    pub fn height(&self) -> u32 {
        self.height.load(Ordering::Acquire)
    }

    fn install(&self, addr: u32, node: Node) {
        self.nodes.slot(addr).store(Some(Arc::new(node)));
    }

    fn load(&self, addr: u32) -> Result<Arc<Node>> {
        let slot = self.nodes.slot(addr);
        if let Some(n) = slot.load_full() {
            return Ok(n);
        }
        let node = Arc::new(self.read_node(addr)?);
        let prev = slot.compare_and_swap(&None::<Arc<Node>>, Some(node.clone()));
        Ok(match &*prev {
            Some(existing) => existing.clone(),
            None => node,
        })
    }

    fn read_node(&self, addr: u32) -> Result<Node> {
        let page = self.shadow.read(LogicalAddr(addr))?;
        match node::decode(&page)? {
            RawNode::Internal(n) => Ok(Node::Internal(n)),
            RawNode::Leaf { prev, records } => {
                let mut entries = Vec::with_capacity(records.len());
                for (key, body) in records {
                    entries.push(match body {
                        RawBody::Inline(v) => LeafEntry { key, value: Arc::new(v), chain: None },
                        RawBody::Overflow { first, len } => {
                            let (value, pages) = self.read_chain(first, len as usize)?;
                            let value = Arc::new(value);
                            let chain = Arc::new(OverflowChain { pages, value: value.clone() });
                            LeafEntry { key, value, chain: Some(chain) }
                        }
                    });
                }
                let leaf = Leaf::new(entries, prev);
                leaf.persisted_live.store(leaf.live_count(), Ordering::Release);
                Ok(Node::Leaf(leaf))
            }
        }
    }

    fn read_chain(&self, first: u32, len: usize) -> Result<(Vec<u8>, Vec<u32>)> {
        let mut value = Vec::with_capacity(len);
        let mut pages = Vec::new();
        let mut next = first;
        while value.len() < len {
            if next == 0 || pages.len() > node::overflow_pages_for(len) {
                return Err(Error::Corrupt(format!("overflow chain from page {first} is truncated")));
            }
            pages.push(next);
            let page = self.shadow.read(LogicalAddr(next))?;
            let (n, data) = node::decode_overflow(&page)?;
            value.extend_from_slice(data);
            next = n;
        }
        if value.len() != len {
            return Err(Error::Corrupt(format!("overflow chain from page {first} has wrong length")));
        }
        Ok((value, pages))
    }

    fn find_at_depth(&self, key: &[u8], depth: u32) -> Result<u32> {
        let mut addr = self.root.load(Ordering::Acquire);
        for _ in 0..depth {
            match &*self.load(addr)? {
                Node::Internal(n) => addr = n.children[n.route(key)],
                Node::Leaf(_) => return Err(Error::Corrupt(format!("leaf {addr} above leaf level"))),
            }
        }
        Ok(addr)
    }

    fn find_leaf(&self, key: &[u8]) -> Result<(u32, Arc<Node>)> {
        let addr = self.find_at_depth(key, self.height() - 1)?;
        let node = self.load(addr)?;
        match &*node {
            Node::Leaf(_) => Ok((addr, node)),
            Node::Internal(_) => Err(Error::Corrupt(format!("internal node {addr} at leaf level"))),
        }
    }

    /// Looks a key up in the skip list, then the tree. Tombstones are
    /// returned like any other value.
    pub fn search(&self, key: &[u8]) -> Result<Option<(Arc<Vec<u8>>, RecordLocation)>> {
        let epoch = self.epoch();
        if let Some((node, value)) = self.list.load().get(key) {
            return Ok(Some((value, RecordLocation::List { node, epoch })));
        }
        let (addr, node) = self.find_leaf(key)?;
        let leaf = leaf_of(&node);
        Ok(leaf.search(key).ok().map(|slot| {
            (leaf.value(slot), RecordLocation::Tree { leaf: LogicalAddr(addr), slot: slot as u32, epoch })
        }))
    }

    /// Visits tree records with keys `>= from` in order until `f` returns false.
    fn scan_tree(&self, from: &[u8], f: &mut dyn FnMut(u32, usize, &[u8], Arc<Vec<u8>>) -> bool) -> Result<()> {
        let root = self.root.load(Ordering::Acquire);
        self.scan_node(root, self.height() - 1, from, f).map(|_| ())
    }

    fn scan_node(
        &self,
        addr: u32,
        depth: u32,
        from: &[u8],
        f: &mut dyn FnMut(u32, usize, &[u8], Arc<Vec<u8>>) -> bool,
    ) -> Result<bool> {
        let node = self.load(addr)?;
        match &*node {
            Node::Internal(n) if depth > 0 => {
                for &child in &n.children[n.route(from)..] {
                    if !self.scan_node(child, depth - 1, from, f)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Node::Leaf(l) if depth == 0 => {
                let start = l.keys.partition_point(|k| **k < *from);
                for slot in start..l.len() {
                    if !f(addr, slot, &l.keys[slot], l.value(slot)) {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            _ => Err(Error::Corrupt(format!("node {addr} at unexpected depth"))),
        }
    }

    /// Records in `[k1, k2]` from both levels in key order, plus the smallest
    /// indexed key `>= k2`.
    pub fn range(&self, k1: &[u8], k2: &[u8]) -> Result<RangeResult> {
        if k1 > k2 {
            return Err(Error::InvalidArgument("range start exceeds range end".into()));
        }
        let epoch = self.epoch();
        let list = self.list.load();
        let mut from_list = Vec::new();
        let mut list_succ = None;
        for (node, key) in list.iter_from(k1) {
            if key <= k2 {
                from_list.push(RangeRecord {
                    key: key.to_vec(),
                    value: list.value(node),
                    location: RecordLocation::List { node, epoch },
                });
            }
            if key >= k2 {
                list_succ = Some(key.to_vec());
                break;
            }
        }
        let mut from_tree = Vec::new();
        let mut tree_succ = None;
        self.scan_tree(k1, &mut |leaf, slot, key, value| {
            if key <= k2 {
                from_tree.push(RangeRecord {
                    key: key.to_vec(),
                    value,
                    location: RecordLocation::Tree { leaf: LogicalAddr(leaf), slot: slot as u32, epoch },
                });
            }
            if key >= k2 {
                tree_succ = Some(key.to_vec());
                return false;
            }
            true
        })?;
        let mut records = Vec::with_capacity(from_list.len() + from_tree.len());
        let (mut a, mut b) = (from_list.into_iter().peekable(), from_tree.into_iter().peekable());
        while let (Some(x), Some(y)) = (a.peek(), b.peek()) {
            debug_assert!(x.key != y.key, "key indexed in both list and tree");
            records.push(if x.key < y.key { a.next() } else { b.next() }.unwrap());
        }
        records.extend(a);
        records.extend(b);
        let successor = match (list_succ, tree_succ) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        };
        Ok(RangeResult { records, successor })
    }

    /// Inserts a key known to be absent from both levels.
    pub fn insert(&self, key: &[u8], value: Vec<u8>) -> Result<RecordLocation> {
        validate(key, &value)?;
        let epoch = self.epoch();
        let node = self.list.load().insert(key, value)?;
        Ok(RecordLocation::List { node, epoch })
    }

    /// Claims `n` skip-list slots for subsequent [`Index::insert_reserved`] calls.
    pub fn reserve(&self, n: u32) -> bool {
        self.list.load().try_reserve(n)
    }

    pub fn insert_reserved(&self, key: &[u8], value: Vec<u8>) -> Result<RecordLocation> {
        validate(key, &value)?;
        let epoch = self.epoch();
        let node = self.list.load().insert_reserved(key, value)?;
        Ok(RecordLocation::List { node, epoch })
    }

    pub fn update(&self, loc: RecordLocation, value: Vec<u8>) -> Result<()> {
        if value.len() > MAX_VALUE {
            return Err(Error::InvalidArgument(format!("value length {} exceeds {MAX_VALUE}", value.len())));
        }
        let current = self.epoch();
        if let Some(found) = loc.epoch().filter(|&e| e != current) {
            return Err(Error::StaleLocation { found, current });
        }
        match loc {
            RecordLocation::List { node, .. } => {
                self.list.load().set_value(node, value);
                Ok(())
            }
            RecordLocation::Tree { leaf, slot, .. } => {
                let node = self.load(leaf.0)?;
                let Node::Leaf(l) = &*node else {
                    return Err(Error::InvalidArgument(format!("{leaf} is not a leaf")));
                };
                if slot as usize >= l.len() {
                    return Err(Error::InvalidArgument(format!("slot {slot} out of range in {leaf}")));
                }
                if l.update(slot as usize, value) {
                    self.dirty_leaves.lock().unwrap().push(leaf.0);
                }
                Ok(())
            }
            RecordLocation::None => Err(Error::InvalidArgument("update needs a List or Tree location".into())),
        }
    }

    /// Logical addresses the next checkpoint will write.
    pub fn pending_writes(&self) -> Vec<LogicalAddr> {
        let ps = self.persist.lock().unwrap();
        let mut out: BTreeSet<u32> = ps.pending.clone();
        out.extend(self.dirty_leaves.lock().unwrap().iter().copied());
        out.into_iter().map(LogicalAddr).collect()
    }

    /// Writes every modified node, the allocation bitmap and the meta page
    /// through the shadow layer. Must not overlap other index operations.
    pub fn checkpoint(&self) -> Result<CheckpointStats> {
        let mut ps = self.persist.lock().unwrap();
        let dirty = std::mem::take(&mut *self.dirty_leaves.lock().unwrap());
        ps.pending.extend(dirty);
        let mut stats = CheckpointStats::default();
        if ps.pending.is_empty() && ps.alloc.dirty_pages.is_empty() && !self.meta_dirty.load(Ordering::Acquire) {
            return Ok(stats);
        }
        let pending: Vec<u32> = ps.pending.iter().copied().collect();
        for addr in pending {
            let node = self.nodes.slot(addr).load_full().expect("pending node is cached");
            match &*node {
                Node::Internal(n) => self.shadow.write(LogicalAddr(addr), &node::encode_internal(n)?)?,
                Node::Leaf(l) => {
                    stats.overflow_pages_written += self.write_leaf(addr, l, &mut ps.alloc)?;
                    let live = l.live_count();
                    let before = l.persisted_live.swap(live, Ordering::AcqRel);
                    ps.record_count = ps.record_count + live as u64 - before as u64;
                    l.dirty.store(false, Ordering::Release);
                }
            }
            stats.nodes_written += 1;
            ps.pending.remove(&addr);
        }
        let pages: Vec<u32> = ps.alloc.dirty_pages.iter().copied().collect();
        for p in pages {
            self.shadow.write(LogicalAddr(1 + p), &ps.alloc.page_bytes(p))?;
            ps.alloc.dirty_pages.remove(&p);
            stats.bitmap_pages_written += 1;
        }
        let mut meta = Page::zeroed();
        meta[0..8].copy_from_slice(META_MAGIC);
        let fields =
            [META_VERSION, self.root.load(Ordering::Acquire), self.height(), ps.alloc.bitmap_pages(), ps.alloc.capacity];
        for (i, f) in fields.iter().enumerate() {
            meta[8 + i * 4..12 + i * 4].copy_from_slice(&f.to_le_bytes());
        }
        meta[32..40].copy_from_slice(&ps.record_count.to_le_bytes());
        self.shadow.write(LogicalAddr(0), &meta)?;
        self.meta_dirty.store(false, Ordering::Release);
        Ok(stats)
    }

    fn write_leaf(&self, addr: u32, leaf: &Leaf, alloc: &mut LogicalAlloc) -> Result<usize> {
        let mut chains = leaf.chains.lock().unwrap();
        let values: Vec<Arc<Vec<u8>>> = (0..leaf.len()).map(|i| leaf.value(i)).collect();
        let mut written = 0;
        for (i, value) in values.iter().enumerate() {
            let inline = node::is_inline(leaf.keys[i].len(), value.len());
            let reusable = chains[i].as_ref().is_some_and(|c| Arc::ptr_eq(&c.value, value));
            if reusable && !inline {
                continue;
            }
            if let Some(old) = chains[i].take() {
                for &p in &old.pages {
                    alloc.free(p);
                }
            }
            if inline {
                continue;
            }
            let n = node::overflow_pages_for(value.len());
            let pages = (0..n).map(|_| alloc.alloc()).collect::<Result<Vec<u32>>>()?;
            for (j, data) in value.chunks(node::OVERFLOW_DATA).enumerate() {
                let next = pages.get(j + 1).copied().unwrap_or(0);
                self.shadow.write(LogicalAddr(pages[j]), &node::encode_overflow(next, data))?;
            }
            written += n;
            chains[i] = Some(Arc::new(OverflowChain { pages, value: value.clone() }));
        }
        let records = leaf.keys.iter().zip(values.iter()).zip(chains.iter()).map(|((k, v), c)| {
            let body = match c {
                Some(chain) => Body::Overflow { first: chain.pages[0], len: v.len() as u32 },
                None => Body::Inline(v),
            };
            (&k[..], body)
        });
        let page = node::encode_leaf(leaf.prev, records)?;
        self.shadow.write(LogicalAddr(addr), &page)?;
        Ok(written)
    }

    /// Drops clean cached leaves until the cache fits its byte budget.
    pub fn evict(&self) -> usize {
        let Some(cap) = self.config.cache_bytes else { return 0 };
        let ps = self.persist.lock().unwrap();
        let dirty = self.dirty_leaves.lock().unwrap();
        let cached: Vec<(u32, Arc<Node>)> = self.nodes.cached().collect();
        let mut total: usize = cached.iter().map(|(_, n)| n.footprint()).sum();
        let mut evicted = 0;
        for (addr, node) in cached {
            if total <= cap {
                break;
            }
            let Node::Leaf(l) = &*node else { continue };
            if l.dirty.load(Ordering::Acquire) || ps.pending.contains(&addr) || dirty.contains(&addr) {
                continue;
            }
            self.nodes.slot(addr).store(None);
            total -= node.footprint();
            evicted += 1;
        }
        evicted
    }

    pub fn stats(&self) -> IndexStats {
        let ps = self.persist.lock().unwrap();
        let list = self.list.load();
        let (mut cached_nodes, mut cached_bytes) = (0, 0);
        for (_, n) in self.nodes.cached() {
            cached_nodes += 1;
            cached_bytes += n.footprint();
        }
        IndexStats {
            epoch: self.epoch(),
            height: self.height(),
            root: self.root.load(Ordering::Acquire),
            list_len: list.len(),
            list_capacity: list.capacity(),
            persisted_records: ps.record_count,
            allocated_pages: ps.alloc.used,
            cached_nodes,
            cached_bytes,
        }
    }

    pub fn list_len(&self) -> usize {
        self.list.load().len()
    }

    /// Hash of the tree skeleton: node addresses, kinds, keys, separators,
    /// child and sibling pointers. Values are excluded.
    pub fn structure_hash(&self) -> Result<u64> {
        let mut h = Checksummer::new();
        let root = self.root.load(Ordering::Acquire);
        h.update(&root.to_le_bytes());
        h.update(&self.height().to_le_bytes());
        self.hash_node(root, &mut h)?;
        Ok(h.finish())
    }

    fn hash_node(&self, addr: u32, h: &mut Checksummer) -> Result<()> {
        let node = self.load(addr)?;
        h.update(&addr.to_le_bytes());
        match &*node {
            Node::Leaf(l) => {
                h.update(&[1]);
                h.update(&l.prev.to_le_bytes());
                for k in &l.keys {
                    h.update(&(k.len() as u32).to_le_bytes());
                    h.update(k);
                }
            }
            Node::Internal(n) => {
                h.update(&[2]);
                for (sep, &child) in n.seps.iter().zip(&n.children) {
                    match sep {
                        Some(k) => {
                            h.update(&(k.len() as u32).to_le_bytes());
                            h.update(k);
                        }
                        None => h.update(&u32::MAX.to_le_bytes()),
                    }
                    self.hash_node(child, h)?;
                }
            }
        }
        Ok(())
    }

    /// All records from both levels in key order, tombstones included.
    pub fn contents(&self) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let list = self.list.load();
        let mut out: Vec<(Vec<u8>, Vec<u8>)> = list.iter().map(|(id, k)| (k.to_vec(), (*list.value(id)).clone())).collect();
        self.scan_tree(&[], &mut |_, _, k, v| {
            out.push((k.to_vec(), (*v).clone()));
            true
        })?;
        out.sort();
        Ok(out)
    }

    /// Verifies ordering, separator bounds, uniform leaf depth, sibling links
    /// and list/tree disjointness. With `strict`, every node must also fit a
    /// page, as holds right after a merge.
    pub fn check_invariants(&self, strict: bool) -> Result<TreeReport> {
        let bad = |m: String| Error::Corrupt(m);
        let mut report = TreeReport { height: self.height(), ..TreeReport::default() };
        let mut leaves = Vec::new();
        let root = self.root.load(Ordering::Acquire);
        self.check_node(root, self.height() - 1, None, None, true, strict, &mut report, &mut leaves)?;
        let mut expected_prev = 0;
        for (addr, prev) in leaves {
            if prev != expected_prev {
                return Err(bad(format!("leaf {addr} has prev {prev}, expected {expected_prev}")));
            }
            expected_prev = addr;
        }
        let list = self.list.load();
        list.check_invariants().map_err(bad)?;
        for (_, key) in list.iter() {
            let (_, node) = self.find_leaf(key)?;
            if leaf_of(&node).search(key).is_ok() {
                return Err(bad(format!("key {key:?} in both skip list and tree")));
            }
        }
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn check_node(
        &self,
        addr: u32,
        depth: u32,
        lower: Option<&[u8]>,
        upper: Option<&[u8]>,
        is_root: bool,
        strict: bool,
        report: &mut TreeReport,
        leaves: &mut Vec<(u32, u32)>,
    ) -> Result<()> {
        let bad = |m: String| Error::Corrupt(m);
        let node = self.load(addr)?;
        if strict && node.footprint() > PAGE_SIZE {
            return Err(bad(format!("node {addr} exceeds a page")));
        }
        match &*node {
            Node::Leaf(l) => {
                if depth != 0 {
                    return Err(bad(format!("leaf {addr} at depth above leaf level")));
                }
                report.leaves += 1;
                if l.footprint() > PAGE_SIZE {
                    report.oversized_leaves += 1;
                }
                for (i, k) in l.keys.iter().enumerate() {
                    if i > 0 && l.keys[i - 1] >= *k {
                        return Err(bad(format!("leaf {addr} keys out of order")));
                    }
                    if lower.is_some_and(|lo| **k <= *lo) || upper.is_some_and(|hi| **k > *hi) {
                        return Err(bad(format!("leaf {addr} key outside separator bounds")));
                    }
                    if l.value(i).is_empty() {
                        report.tombstones += 1;
                    } else {
                        report.records += 1;
                    }
                }
                leaves.push((addr, l.prev));
            }
            Node::Internal(n) => {
                if depth == 0 {
                    return Err(bad(format!("internal node {addr} at leaf level")));
                }
                report.internals += 1;
                if n.children.is_empty() || n.seps.len() != n.children.len() {
                    return Err(bad(format!("internal node {addr} malformed")));
                }
                if is_root && n.seps.last().unwrap().is_some() {
                    return Err(bad("root's last separator must be unbounded".into()));
                }
                if !is_root && n.seps.last().unwrap().as_deref() != upper {
                    return Err(bad(format!("internal node {addr} last separator differs from parent's")));
                }
                let mut lo = lower;
                for (i, (sep, &child)) in n.seps.iter().zip(&n.children).enumerate() {
                    if i + 1 < n.seps.len() && sep.is_none() {
                        return Err(bad(format!("internal node {addr} has an inner unbounded separator")));
                    }
                    if let (Some(a), Some(b)) = (lo, sep.as_deref()) {
                        if a >= b {
                            return Err(bad(format!("internal node {addr} separators out of order")));
                        }
                    }
                    self.check_node(child, depth - 1, lo, sep.as_deref(), false, strict, report, leaves)?;
                    lo = sep.as_deref();
                }
            }
        }
        Ok(())
    }

    /// Replaces an empty tree with the given shape. Testing aid.
    #[doc(hidden)]
    pub fn install_layout(&self, layout: &TreeLayout) -> Result<()> {
        if self.list_len() != 0 || self.stats().height != 1 || !self.contents()?.is_empty() {
            return Err(Error::InvalidState("layout can only replace an empty index"));
        }
        let mut ps = self.persist.lock().unwrap();
        let old_root = self.root.load(Ordering::Acquire);
        ps.alloc.free(old_root);
        ps.pending.remove(&old_root);
        self.nodes.slot(old_root).store(None);
        let mut prev = 0;
        let (root, height) = self.build_layout(layout, &mut ps, &mut prev)?;
        self.root.store(root, Ordering::Release);
        self.height.store(height, Ordering::Release);
        self.meta_dirty.store(true, Ordering::Release);
        Ok(())
    }

    fn build_layout(&self, layout: &TreeLayout, ps: &mut PersistState, prev: &mut u32) -> Result<(u32, u32)> {
        let addr = ps.alloc.alloc()?;
        ps.pending.insert(addr);
        match layout {
            TreeLayout::Leaf(records) => {
                let entries = records
                    .iter()
                    .map(|(k, v)| LeafEntry { key: k.as_slice().into(), value: Arc::new(v.clone()), chain: None })
                    .collect();
                self.install(addr, Node::Leaf(Leaf::new(entries, *prev)));
                *prev = addr;
                Ok((addr, 1))
            }
            TreeLayout::Internal(children) => {
                let mut node = Internal { seps: Vec::new(), children: Vec::new() };
                let mut height = 0;
                for (sep, child) in children {
                    let (c, h) = self.build_layout(child, ps, prev)?;
                    height = h;
                    node.seps.push(sep.as_deref().map(Into::into));
                    node.children.push(c);
                }
                self.install(addr, Node::Internal(node));
                Ok((addr, height + 1))
            }
        }
    }

    /// Current tree shape with values. Testing aid.
    #[doc(hidden)]
    pub fn layout(&self) -> Result<TreeLayout> {
        self.layout_of(self.root.load(Ordering::Acquire))
    }

    fn layout_of(&self, addr: u32) -> Result<TreeLayout> {
        Ok(match &*self.load(addr)? {
            Node::Leaf(l) => TreeLayout::Leaf((0..l.len()).map(|i| (l.keys[i].to_vec(), (*l.value(i)).clone())).collect()),
            Node::Internal(n) => TreeLayout::Internal(
                n.seps
                    .iter()
                    .zip(&n.children)
                    .map(|(s, &c)| Ok((s.as_ref().map(|s| s.to_vec()), self.layout_of(c)?)))
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

#[cfg(test)]
mod tests;
