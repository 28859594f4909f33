//! In-memory tree nodes and their slotted-page encoding.
//!
//! Page layout (little-endian):
//!
//! ```text
//! 0      kind (1 leaf, 2 internal)
//! 2..4   record count
//! 4..8   left-sibling logical address (leaves; 0 = none)
//! 8..10  heap start offset
//! 16..   u16 slot directory, one offset per record
//! ...    record heap, packed toward the end of the page
//! ```
//!
//! Leaf record: `key_len u16 | val_len u32 | key | value`. When the high bit of
//! `val_len` is set the value lives in an overflow chain and the body holds the
//! chain's first logical page instead. Internal record:
//! `key_len u16 | child u32 | key`, with `key_len = 0xFFFF` for the unbounded
//! rightmost separator.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;

use crate::error::{Error, Result};
use crate::storage::{Page, PAGE_SIZE};

pub const MAX_KEY: usize = 1024;
pub const MAX_VALUE: usize = 65536;

pub(crate) const NODE_HEADER: usize = 16;
const SLOT_BYTES: usize = 2;
const REC_HEADER: usize = 6;
/// Largest slot + record footprint stored inline; three always fit a page.
pub(crate) const MAX_INLINE_FOOTPRINT: usize = (PAGE_SIZE - NODE_HEADER) / 3;
const OVERFLOW_FLAG: u32 = 1 << 31;
const INF_KEY_LEN: u16 = u16::MAX;
const KIND_LEAF: u8 = 1;
const KIND_INTERNAL: u8 = 2;
pub(crate) const OVERFLOW_HEADER: usize = 8;
pub(crate) const OVERFLOW_DATA: usize = PAGE_SIZE - OVERFLOW_HEADER;

pub(crate) fn is_inline(key_len: usize, val_len: usize) -> bool {
    SLOT_BYTES + REC_HEADER + key_len + val_len <= MAX_INLINE_FOOTPRINT
}

pub(crate) fn leaf_footprint(key_len: usize, val_len: usize) -> usize {
    if is_inline(key_len, val_len) {
        SLOT_BYTES + REC_HEADER + key_len + val_len
    } else {
        SLOT_BYTES + REC_HEADER + key_len + 4
    }
}

pub(crate) fn internal_footprint(sep: Option<&[u8]>) -> usize {
    SLOT_BYTES + REC_HEADER + sep.map_or(0, <[u8]>::len)
}

pub(crate) fn overflow_pages_for(len: usize) -> usize {
    len.div_ceil(OVERFLOW_DATA).max(1)
}

/// Logical pages holding a large value as persisted, tied to the value
/// instance they were written from.
#[derive(Debug)]
pub(crate) struct OverflowChain {
    pub pages: Vec<u32>,
    pub value: Arc<Vec<u8>>,
}

#[derive(Clone)]
pub(crate) struct LeafEntry {
    pub key: Box<[u8]>,
    pub value: Arc<Vec<u8>>,
    pub chain: Option<Arc<OverflowChain>>,
}

impl LeafEntry {
    pub fn footprint(&self) -> usize {
        leaf_footprint(self.key.len(), self.value.len())
    }
}

pub(crate) struct Leaf {
    pub keys: Vec<Box<[u8]>>,
    pub values: Vec<ArcSwap<Vec<u8>>>,
    pub chains: Mutex<Vec<Option<Arc<OverflowChain>>>>,
    pub prev: u32,
    footprint: AtomicUsize,
    pub persisted_live: AtomicU32,
    pub dirty: AtomicBool,
}

impl Leaf {
    pub fn new(entries: Vec<LeafEntry>, prev: u32) -> Leaf {
        let footprint = NODE_HEADER + entries.iter().map(LeafEntry::footprint).sum::<usize>();
        let mut keys = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut chains = Vec::with_capacity(entries.len());
        for e in entries {
            keys.push(e.key);
            values.push(ArcSwap::new(e.value));
            chains.push(e.chain);
        }
        Leaf {
            keys,
            values,
            chains: Mutex::new(chains),
            prev,
            footprint: AtomicUsize::new(footprint),
            persisted_live: AtomicU32::new(0),
            dirty: AtomicBool::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn value(&self, slot: usize) -> Arc<Vec<u8>> {
        self.values[slot].load_full()
    }

    /// Replaces a slot's value; returns whether the leaf was clean before.
    pub fn update(&self, slot: usize, value: Vec<u8>) -> bool {
        let key_len = self.keys[slot].len();
        let new_fp = leaf_footprint(key_len, value.len());
        let old = self.values[slot].swap(Arc::new(value));
        let old_fp = leaf_footprint(key_len, old.len());
        if new_fp >= old_fp {
            self.footprint.fetch_add(new_fp - old_fp, Ordering::AcqRel);
        } else {
            self.footprint.fetch_sub(old_fp - new_fp, Ordering::AcqRel);
        }
        !self.dirty.swap(true, Ordering::AcqRel)
    }

    /// Encoded size if written now; may exceed a page after growing updates.
    pub fn footprint(&self) -> usize {
        self.footprint.load(Ordering::Acquire)
    }

    pub fn entries(&self) -> Vec<LeafEntry> {
        let chains = self.chains.lock().unwrap();
        self.keys
            .iter()
            .zip(&self.values)
            .zip(chains.iter())
            .map(|((k, v), c)| LeafEntry { key: k.clone(), value: v.load_full(), chain: c.clone() })
            .collect()
    }

    pub fn live_count(&self) -> u32 {
        self.values.iter().filter(|v| !v.load().is_empty()).count() as u32
    }

    pub fn search(&self, key: &[u8]) -> std::result::Result<usize, usize> {
        self.keys.binary_search_by(|k| k.as_ref().cmp(key))
    }
}

pub(crate) struct Internal {
    /// Inclusive upper bound of each child's key range; `None` is unbounded.
    pub seps: Vec<Option<Box<[u8]>>>,
    pub children: Vec<u32>,
}

impl Internal {
    pub fn footprint(&self) -> usize {
        NODE_HEADER + self.seps.iter().map(|s| internal_footprint(s.as_deref())).sum::<usize>()
    }

    /// Index of the child covering `key`.
    pub fn route(&self, key: &[u8]) -> usize {
        self.seps.partition_point(|s| s.as_deref().is_some_and(|s| s < key)).min(self.children.len() - 1)
    }
}

pub(crate) enum Node {
    Leaf(Leaf),
    Internal(Internal),
}

impl Node {
    pub fn footprint(&self) -> usize {
        match self {
            Node::Leaf(l) => l.footprint(),
            Node::Internal(n) => n.footprint(),
        }
    }
}

pub(crate) enum Body<'a> {
    Inline(&'a [u8]),
    Overflow { first: u32, len: u32 },
}

fn put_u16(page: &mut [u8], at: usize, v: u16) {
    page[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_u32(page: &mut [u8], at: usize, v: u32) {
    page[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_u16(page: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(page[at..at + 2].try_into().unwrap())
}

fn get_u32(page: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(page[at..at + 4].try_into().unwrap())
}

struct PageWriter {
    page: Page,
    count: usize,
    heap: usize,
}

impl PageWriter {
    fn new(kind: u8, prev: u32) -> PageWriter {
        let mut page = Page::zeroed();
        page[0] = kind;
        put_u32(&mut page, 4, prev);
        PageWriter { page, count: 0, heap: PAGE_SIZE }
    }

    fn push(&mut self, parts: &[&[u8]]) -> Result<()> {
        let len: usize = parts.iter().map(|p| p.len()).sum();
        let slot_end = NODE_HEADER + (self.count + 1) * SLOT_BYTES;
        if self.heap < slot_end + len {
            return Err(Error::InvalidState("node does not fit a page"));
        }
        self.heap -= len;
        let mut at = self.heap;
        for p in parts {
            self.page[at..at + p.len()].copy_from_slice(p);
            at += p.len();
        }
        let heap = self.heap as u16;
        put_u16(&mut self.page, NODE_HEADER + self.count * SLOT_BYTES, heap);
        self.count += 1;
        Ok(())
    }

    fn finish(mut self) -> Page {
        put_u16(&mut self.page, 2, self.count as u16);
        put_u16(&mut self.page, 8, self.heap as u16);
        self.page
    }
}

pub(crate) fn encode_leaf<'a>(prev: u32, records: impl IntoIterator<Item = (&'a [u8], Body<'a>)>) -> Result<Page> {
    let mut w = PageWriter::new(KIND_LEAF, prev);
    for (key, body) in records {
        let key_len = (key.len() as u16).to_le_bytes();
        match body {
            Body::Inline(v) => {
                let val_len = (v.len() as u32).to_le_bytes();
                w.push(&[&key_len, &val_len, key, v])?;
            }
            Body::Overflow { first, len } => {
                let val_len = (len | OVERFLOW_FLAG).to_le_bytes();
                w.push(&[&key_len, &val_len, key, &first.to_le_bytes()])?;
            }
        }
    }
    Ok(w.finish())
}

pub(crate) fn encode_internal(node: &Internal) -> Result<Page> {
    let mut w = PageWriter::new(KIND_INTERNAL, 0);
    for (sep, child) in node.seps.iter().zip(&node.children) {
        let (len, key): (u16, &[u8]) = match sep {
            Some(k) => (k.len() as u16, k),
            None => (INF_KEY_LEN, &[]),
        };
        w.push(&[&len.to_le_bytes(), &child.to_le_bytes(), key])?;
    }
    Ok(w.finish())
}

pub(crate) enum RawBody {
    Inline(Vec<u8>),
    Overflow { first: u32, len: u32 },
}

pub(crate) enum RawNode {
    Leaf { prev: u32, records: Vec<(Box<[u8]>, RawBody)> },
    Internal(Internal),
}

fn corrupt(what: &str) -> Error {
    Error::Corrupt(format!("tree node: {what}"))
}

pub(crate) fn decode(page: &[u8]) -> Result<RawNode> {
    let count = get_u16(page, 2) as usize;
    if NODE_HEADER + count * SLOT_BYTES > PAGE_SIZE {
        return Err(corrupt("slot directory overruns page"));
    }
    let slice = |at: usize, len: usize| -> Result<&[u8]> { page.get(at..at + len).ok_or_else(|| corrupt("record overruns page")) };
    match page[0] {
        KIND_LEAF => {
            let prev = get_u32(page, 4);
            let mut records = Vec::with_capacity(count);
            for i in 0..count {
                let off = get_u16(page, NODE_HEADER + i * SLOT_BYTES) as usize;
                let hdr = slice(off, REC_HEADER)?;
                let key_len = get_u16(hdr, 0) as usize;
                let val_len = get_u32(hdr, 2);
                let key: Box<[u8]> = slice(off + REC_HEADER, key_len)?.into();
                let body_at = off + REC_HEADER + key_len;
                let body = if val_len & OVERFLOW_FLAG != 0 {
                    RawBody::Overflow { first: get_u32(slice(body_at, 4)?, 0), len: val_len & !OVERFLOW_FLAG }
                } else {
                    RawBody::Inline(slice(body_at, val_len as usize)?.to_vec())
                };
                records.push((key, body));
            }
            Ok(RawNode::Leaf { prev, records })
        }
        KIND_INTERNAL => {
            let mut seps = Vec::with_capacity(count);
            let mut children = Vec::with_capacity(count);
            for i in 0..count {
                let off = get_u16(page, NODE_HEADER + i * SLOT_BYTES) as usize;
                let hdr = slice(off, REC_HEADER)?;
                let key_len = get_u16(hdr, 0);
                children.push(get_u32(hdr, 2));
                seps.push(if key_len == INF_KEY_LEN {
                    None
                } else {
                    Some(slice(off + REC_HEADER, key_len as usize)?.into())
                });
            }
            if children.is_empty() {
                return Err(corrupt("internal node without children"));
            }
            Ok(RawNode::Internal(Internal { seps, children }))
        }
        k => Err(corrupt(&format!("unknown node kind {k}"))),
    }
}

pub(crate) fn encode_overflow(next: u32, data: &[u8]) -> Page {
    let mut page = Page::zeroed();
    put_u32(&mut page, 0, next);
    put_u32(&mut page, 4, data.len() as u32);
    page[OVERFLOW_HEADER..OVERFLOW_HEADER + data.len()].copy_from_slice(data);
    page
}

pub(crate) fn decode_overflow(page: &[u8]) -> Result<(u32, &[u8])> {
    let next = get_u32(page, 0);
    let len = get_u32(page, 4) as usize;
    if len > OVERFLOW_DATA {
        return Err(corrupt("overflow page length"));
    }
    Ok((next, &page[OVERFLOW_HEADER..OVERFLOW_HEADER + len]))
}
