//! Shadow paging over a [`BlockDevice`].
//!
//! The layer exposes a *current* file of logical pages and a *stable* snapshot
//! of it. Every write goes out of place to a free physical page and redirects
//! the in-memory page table. [`Shadow::flush`] records the page table on the
//! device (as a delta of the entries changed since the previous flush, or as a
//! full image when the delta region is exhausted) and thereby makes the current
//! file the new stable snapshot. [`Shadow::open`] restores the last stable
//! snapshot.
//!
//! On-disk layout, all integers little-endian:
//!
//! ```text
//! page 0, 1                 header slots (ping-pong, higher valid generation wins)
//! 2 .. 2+I                  page-table image slot 0
//! 2+I .. 2+2I               page-table image slot 1
//! 2+2I .. 2+2I+D            delta region
//! 2+2I+D .. capacity        data pages
//! ```
//!
//! `I` is the number of pages needed for one 4-byte entry per logical page and
//! `D` the configured delta region size.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::checksum::{checksum, Checksummer};
use crate::error::{Error, Result};
use crate::storage::{BlockDevice, Page, PageId, PAGE_SIZE};

const HEADER_MAGIC: &[u8; 8] = b"WKVSHDW1";
const FORMAT_VERSION: u32 = 1;
const CHECKSUM_OFFSET: usize = PAGE_SIZE - 8;
const ENTRIES_PER_IMAGE_PAGE: usize = PAGE_SIZE / 4;
const DELTA_HEADER_LEN: usize = 16;
/// Number of (logical, physical) pairs one delta page carries.
pub const PAIRS_PER_DELTA_PAGE: usize = (CHECKSUM_OFFSET - DELTA_HEADER_LEN) / 8;
const UNMAPPED: u32 = 0;

/// Page number in the current file, as seen by upper layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogicalAddr(pub u32);

impl fmt::Display for LogicalAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

/// Count of successful flushes. A freshly formatted device is at epoch 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SnapshotEpoch(pub u64);

#[derive(Clone, Debug)]
pub struct ShadowConfig {
    pub logical_capacity: u32,
    pub delta_region_pages: u32,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig { logical_capacity: 1 << 16, delta_region_pages: 1024 }
    }
}

/// Physical placement of the header, image slots, delta region and data pages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub logical_capacity: u32,
    pub image_pages: u32,
    pub delta_pages: u32,
    pub capacity: u32,
}

impl Layout {
    pub fn new(logical_capacity: u32, delta_pages: u32, capacity: u32) -> Result<Layout> {
        if logical_capacity == 0 || delta_pages == 0 {
            return Err(Error::InvalidArgument("logical capacity and delta region must be nonzero".into()));
        }
        let image_pages = (logical_capacity as usize).div_ceil(ENTRIES_PER_IMAGE_PAGE) as u32;
        let layout = Layout { logical_capacity, image_pages, delta_pages, capacity };
        if layout.data_start() as u64 >= capacity as u64 {
            return Err(Error::InvalidArgument(format!(
                "device of {capacity} pages leaves no room for data (metadata needs {})",
                layout.data_start()
            )));
        }
        Ok(layout)
    }

    /// Smallest device that holds the metadata plus `data_pages` data pages.
    pub fn required_capacity(logical_capacity: u32, delta_pages: u32, data_pages: u32) -> u32 {
        let image_pages = (logical_capacity as usize).div_ceil(ENTRIES_PER_IMAGE_PAGE) as u32;
        2 + 2 * image_pages + delta_pages + data_pages
    }

    pub fn image_start(&self, slot: u32) -> u32 {
        2 + slot * self.image_pages
    }

    pub fn delta_start(&self) -> u32 {
        2 + 2 * self.image_pages
    }

    pub fn data_start(&self) -> u32 {
        self.delta_start() + self.delta_pages
    }

    pub fn data_pages(&self) -> u32 {
        self.capacity - self.data_start()
    }
}

/// Decoded header slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub generation: u64,
    pub image_slot: u32,
    pub image_epoch: u64,
    pub logical_capacity: u32,
    pub delta_pages: u32,
    pub capacity: u32,
    pub image_checksum: u64,
}

impl Header {
    fn encode(&self) -> Page {
        let mut page = Page::zeroed();
        page[0..8].copy_from_slice(HEADER_MAGIC);
        page[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        page[12..16].copy_from_slice(&self.image_slot.to_le_bytes());
        page[16..24].copy_from_slice(&self.generation.to_le_bytes());
        page[24..32].copy_from_slice(&self.image_epoch.to_le_bytes());
        page[32..36].copy_from_slice(&self.logical_capacity.to_le_bytes());
        page[36..40].copy_from_slice(&self.delta_pages.to_le_bytes());
        page[40..44].copy_from_slice(&self.capacity.to_le_bytes());
        page[44..52].copy_from_slice(&self.image_checksum.to_le_bytes());
        let sum = checksum(&page[..CHECKSUM_OFFSET]);
        page[CHECKSUM_OFFSET..].copy_from_slice(&sum.to_le_bytes());
        page
    }

    fn decode(page: &Page) -> Option<Header> {
        if &page[0..8] != HEADER_MAGIC || read_u32(page, 8) != FORMAT_VERSION {
            return None;
        }
        if checksum(&page[..CHECKSUM_OFFSET]) != read_u64(page, CHECKSUM_OFFSET) {
            return None;
        }
        let header = Header {
            image_slot: read_u32(page, 12),
            generation: read_u64(page, 16),
            image_epoch: read_u64(page, 24),
            logical_capacity: read_u32(page, 32),
            delta_pages: read_u32(page, 36),
            capacity: read_u32(page, 40),
            image_checksum: read_u64(page, 44),
        };
        (header.image_slot < 2).then_some(header)
    }
}

fn read_u16(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(buf[at..at + 2].try_into().unwrap())
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn read_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

struct DeltaPart {
    seq: u64,
    part: u16,
    parts: u16,
    pairs: Vec<(u32, u32)>,
}

impl DeltaPart {
    fn encode(&self) -> Page {
        let mut page = Page::zeroed();
        page[0..8].copy_from_slice(&self.seq.to_le_bytes());
        page[8..10].copy_from_slice(&self.part.to_le_bytes());
        page[10..12].copy_from_slice(&self.parts.to_le_bytes());
        page[12..16].copy_from_slice(&(self.pairs.len() as u32).to_le_bytes());
        for (i, (l, p)) in self.pairs.iter().enumerate() {
            let at = DELTA_HEADER_LEN + i * 8;
            page[at..at + 4].copy_from_slice(&l.to_le_bytes());
            page[at + 4..at + 8].copy_from_slice(&p.to_le_bytes());
        }
        let sum = checksum(&page[..CHECKSUM_OFFSET]);
        page[CHECKSUM_OFFSET..].copy_from_slice(&sum.to_le_bytes());
        page
    }

    fn decode(page: &Page) -> Option<DeltaPart> {
        if checksum(&page[..CHECKSUM_OFFSET]) != read_u64(page, CHECKSUM_OFFSET) {
            return None;
        }
        let count = read_u32(page, 12) as usize;
        if count > PAIRS_PER_DELTA_PAGE {
            return None;
        }
        let pairs = (0..count)
            .map(|i| {
                let at = DELTA_HEADER_LEN + i * 8;
                (read_u32(page, at), read_u32(page, at + 4))
            })
            .collect();
        Some(DeltaPart { seq: read_u64(page, 0), part: read_u16(page, 8), parts: read_u16(page, 10), pairs })
    }
}

/// Bitmap of free data pages; bit set = free.
struct FreeMap {
    first: u32,
    bits: Vec<u64>,
    len: u32,
    free: u32,
    cursor: usize,
}

impl FreeMap {
    fn all_free(first: u32, len: u32) -> FreeMap {
        let words = (len as usize).div_ceil(64);
        let mut bits = vec![u64::MAX; words];
        let tail = len as usize % 64;
        if tail != 0 {
            bits[words - 1] = (1u64 << tail) - 1;
        }
        FreeMap { first, bits, len, free: len, cursor: 0 }
    }

    fn index(&self, page: u32) -> Option<(usize, u64)> {
        let i = page.checked_sub(self.first)?;
        (i < self.len).then(|| ((i / 64) as usize, 1u64 << (i % 64)))
    }

    fn is_free(&self, page: u32) -> bool {
        self.index(page).is_some_and(|(w, m)| self.bits[w] & m != 0)
    }

    /// Marks `page` used; returns false if it already was.
    fn take(&mut self, page: u32) -> bool {
        let Some((w, m)) = self.index(page) else { return false };
        if self.bits[w] & m == 0 {
            return false;
        }
        self.bits[w] &= !m;
        self.free -= 1;
        true
    }

    fn release(&mut self, page: u32) {
        let (w, m) = self.index(page).expect("released page outside the data region");
        debug_assert!(self.bits[w] & m == 0, "double free of physical page {page}");
        if self.bits[w] & m == 0 {
            self.bits[w] |= m;
            self.free += 1;
        }
    }

    fn alloc(&mut self) -> Option<u32> {
        if self.free == 0 {
            return None;
        }
        let words = self.bits.len();
        for step in 0..words {
            let w = (self.cursor + step) % words;
            if self.bits[w] != 0 {
                let bit = self.bits[w].trailing_zeros();
                self.bits[w] &= !(1u64 << bit);
                self.free -= 1;
                self.cursor = w;
                return Some(self.first + w as u32 * 64 + bit);
            }
        }
        None
    }
}

struct State {
    // current file: logical -> physical, UNMAPPED when absent
    table: Vec<u32>,
    mapped: u32,
    // stable mapping of every logical page written since the last flush
    stable_overrides: HashMap<u32, u32>,
    free: FreeMap,
    garbage: Vec<u32>,
    epoch: u64,
    generation: u64,
    image_slot: u32,
    delta_cursor: u32,
    deltas_applied: u32,
}

impl State {
    fn current(&self, addr: u32) -> u32 {
        self.table.get(addr as usize).copied().unwrap_or(UNMAPPED)
    }

    fn stable(&self, addr: u32) -> u32 {
        match self.stable_overrides.get(&addr) {
            Some(&p) => p,
            None => self.current(addr),
        }
    }

    fn set(&mut self, addr: u32, phys: u32) {
        let i = addr as usize;
        if i >= self.table.len() {
            self.table.resize(i + 1, UNMAPPED);
        }
        match (self.table[i] == UNMAPPED, phys == UNMAPPED) {
            (true, false) => self.mapped += 1,
            (false, true) => self.mapped -= 1,
            _ => {}
        }
        self.table[i] = phys;
    }
}

/// Counters for inspection and tests.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShadowStats {
    pub epoch: SnapshotEpoch,
    pub header_generation: u64,
    pub image_slot: u32,
    pub logical_capacity: u32,
    pub physical_capacity: u32,
    pub data_pages: u32,
    pub mapped_pages: u32,
    pub free_pages: u32,
    pub garbage_pages: u32,
    pub dirty_pages: u32,
    pub delta_pages_used: u32,
    pub delta_region_pages: u32,
    pub deltas_since_image: u32,
    /// Bytes held by the resident page table (4 per entry).
    pub page_table_bytes: u64,
}

/// The shadow paging layer.
pub struct Shadow {
    device: Arc<dyn BlockDevice>,
    layout: Layout,
    state: Mutex<State>,
}

impl Shadow {
    /// Recovers the last flushed snapshot from `device`, formatting it first if
    /// it has never been formatted. `config` is only consulted when formatting.
    pub fn open(device: Arc<dyn BlockDevice>, config: &ShadowConfig) -> Result<Shadow> {
        match latest_header(device.as_ref())? {
            Some(header) => Shadow::recover(device, header),
            None => Shadow::format(device, config),
        }
    }

    fn format(device: Arc<dyn BlockDevice>, config: &ShadowConfig) -> Result<Shadow> {
        let layout = Layout::new(config.logical_capacity, config.delta_region_pages, device.capacity())?;
        let image_checksum = write_image(device.as_ref(), &layout, 0, &[])?;
        device.sync()?;
        let header = Header {
            generation: 1,
            image_slot: 0,
            image_epoch: 0,
            logical_capacity: layout.logical_capacity,
            delta_pages: layout.delta_pages,
            capacity: layout.capacity,
            image_checksum,
        };
        device.write_page(PageId(1), &header.encode())?;
        device.sync()?;
        log::debug!("formatted shadow device: {layout:?}");
        let free = FreeMap::all_free(layout.data_start(), layout.data_pages());
        Ok(Shadow::assemble(device, layout, header, Vec::new(), 0, free, 0, 0))
    }

    fn recover(device: Arc<dyn BlockDevice>, header: Header) -> Result<Shadow> {
        let layout = Layout::new(header.logical_capacity, header.delta_pages, device.capacity())?;
        let mut table = read_image(device.as_ref(), &layout, &header)?;

        let mut epoch = header.image_epoch;
        let mut cursor = 0u32;
        let mut deltas = 0u32;
        while let Some((pairs, parts)) = read_delta(device.as_ref(), &layout, cursor, epoch + 1)? {
            for (l, p) in pairs {
                if l >= layout.logical_capacity {
                    return Err(Error::Corrupt(format!("delta maps logical page {l} beyond capacity")));
                }
                if l as usize >= table.len() {
                    table.resize(l as usize + 1, UNMAPPED);
                }
                table[l as usize] = p;
            }
            epoch += 1;
            deltas += 1;
            cursor += parts;
        }
        while table.last() == Some(&UNMAPPED) {
            table.pop();
        }

        let mut free = FreeMap::all_free(layout.data_start(), layout.data_pages());
        let mut mapped = 0;
        for (l, &p) in table.iter().enumerate() {
            if p == UNMAPPED {
                continue;
            }
            if !free.take(p) {
                return Err(Error::Corrupt(format!("logical page {l} maps to unusable or shared physical page {p}")));
            }
            mapped += 1;
        }
        log::debug!("recovered shadow at epoch {epoch}: {mapped} mapped pages, {deltas} deltas");
        Ok(Shadow::assemble(device, layout, header, table, mapped, free, epoch, cursor).with_deltas(deltas))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        device: Arc<dyn BlockDevice>,
        layout: Layout,
        header: Header,
        table: Vec<u32>,
        mapped: u32,
        free: FreeMap,
        epoch: u64,
        delta_cursor: u32,
    ) -> Shadow {
        let state = State {
            table,
            mapped,
            stable_overrides: HashMap::new(),
            free,
            garbage: Vec::new(),
            epoch,
            generation: header.generation,
            image_slot: header.image_slot,
            delta_cursor,
            deltas_applied: 0,
        };
        Shadow { device, layout, state: Mutex::new(state) }
    }

    fn with_deltas(self, deltas: u32) -> Shadow {
        self.state.lock().unwrap().deltas_applied = deltas;
        self
    }

    pub fn device(&self) -> &Arc<dyn BlockDevice> {
        &self.device
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn logical_capacity(&self) -> u32 {
        self.layout.logical_capacity
    }

    pub fn epoch(&self) -> SnapshotEpoch {
        SnapshotEpoch(self.state.lock().unwrap().epoch)
    }

    fn check_addr(&self, addr: LogicalAddr) -> Result<()> {
        if addr.0 >= self.layout.logical_capacity {
            Err(Error::AddrOutOfRange(addr, self.layout.logical_capacity))
        } else {
            Ok(())
        }
    }

    /// Reads the current content of `addr`; unmapped pages read as zeros.
    pub fn read(&self, addr: LogicalAddr) -> Result<Page> {
        self.check_addr(addr)?;
        let phys = self.state.lock().unwrap().current(addr.0);
        if phys == UNMAPPED {
            return Ok(Page::zeroed());
        }
        self.device.read_page(PageId(phys))
    }

    /// Writes `data` to a fresh physical page and redirects `addr` to it.
    ///
    /// The physical page the stable snapshot holds for `addr` is never
    /// overwritten.
    pub fn write(&self, addr: LogicalAddr, data: &Page) -> Result<()> {
        self.check_addr(addr)?;
        let phys = {
            let mut st = self.state.lock().unwrap();
            match st.free.alloc() {
                Some(p) => p,
                None => {
                    Self::gc_locked(&mut st);
                    st.free.alloc().ok_or(Error::DeviceFull)?
                }
            }
        };
        if let Err(e) = self.device.write_page(PageId(phys), data) {
            self.state.lock().unwrap().free.release(phys);
            return Err(e);
        }
        let mut st = self.state.lock().unwrap();
        let old = st.current(addr.0);
        match st.stable_overrides.get(&addr.0) {
            None => {
                st.stable_overrides.insert(addr.0, old);
            }
            Some(&stable) => {
                if old != UNMAPPED && old != stable {
                    st.garbage.push(old);
                }
            }
        }
        st.set(addr.0, phys);
        Ok(())
    }

    /// Makes the current file the new stable snapshot.
    ///
    /// Data pages are synced before the delta (or image and header) that
    /// references them, and that record is synced before the call returns.
    /// On failure the previous snapshot stays the recovery target and the call
    /// may be retried.
    pub fn flush(&self) -> Result<SnapshotEpoch> {
        let mut st = self.state.lock().unwrap();
        let new_epoch = st.epoch + 1;
        let mut dirty: Vec<(u32, u32)> = st.stable_overrides.keys().map(|&l| (l, st.current(l))).collect();
        dirty.sort_unstable();

        self.device.sync()?;

        let parts = dirty.len().div_ceil(PAIRS_PER_DELTA_PAGE).max(1);
        let fits = parts <= u16::MAX as usize && st.delta_cursor as usize + parts <= self.layout.delta_pages as usize;
        if fits {
            let chunks: Vec<&[(u32, u32)]> =
                if dirty.is_empty() { vec![&[]] } else { dirty.chunks(PAIRS_PER_DELTA_PAGE).collect() };
            for (i, chunk) in chunks.iter().enumerate() {
                let part = DeltaPart { seq: new_epoch, part: i as u16, parts: parts as u16, pairs: chunk.to_vec() };
                let at = self.layout.delta_start() + st.delta_cursor + i as u32;
                self.device.write_page(PageId(at), &part.encode())?;
            }
            self.device.sync()?;
            st.delta_cursor += parts as u32;
            st.deltas_applied += 1;
        } else {
            let slot = 1 - st.image_slot;
            let image_checksum = write_image(self.device.as_ref(), &self.layout, slot, &st.table)?;
            self.device.sync()?;
            let header = Header {
                generation: st.generation + 1,
                image_slot: slot,
                image_epoch: new_epoch,
                logical_capacity: self.layout.logical_capacity,
                delta_pages: self.layout.delta_pages,
                capacity: self.layout.capacity,
                image_checksum,
            };
            self.device.write_page(PageId((header.generation % 2) as u32), &header.encode())?;
            self.device.sync()?;
            st.generation = header.generation;
            st.image_slot = slot;
            st.delta_cursor = 0;
            st.deltas_applied = 0;
            log::debug!("wrote full page-table image at epoch {new_epoch} into slot {slot}");
        }

        let superseded: Vec<(u32, u32)> = st.stable_overrides.drain().collect();
        for (l, stable) in superseded {
            if stable != UNMAPPED && stable != st.current(l) {
                st.garbage.push(stable);
            }
        }
        st.epoch = new_epoch;
        Ok(SnapshotEpoch(new_epoch))
    }

    /// Returns physical pages referenced by neither the current nor the
    /// stable table to the free list.
    pub fn gc(&self) -> usize {
        let mut st = self.state.lock().unwrap();
        Self::gc_locked(&mut st)
    }

    fn gc_locked(st: &mut State) -> usize {
        let garbage = std::mem::take(&mut st.garbage);
        let n = garbage.len();
        for p in garbage {
            st.free.release(p);
        }
        n
    }

    /// Physical page currently backing `addr`.
    pub fn mapping(&self, addr: LogicalAddr) -> Option<PageId> {
        let p = self.state.lock().unwrap().current(addr.0);
        (p != UNMAPPED).then_some(PageId(p))
    }

    /// Physical page the stable snapshot holds for `addr`.
    pub fn stable_mapping(&self, addr: LogicalAddr) -> Option<PageId> {
        let p = self.state.lock().unwrap().stable(addr.0);
        (p != UNMAPPED).then_some(PageId(p))
    }

    pub fn is_free(&self, page: PageId) -> bool {
        self.state.lock().unwrap().free.is_free(page.0)
    }

    pub fn is_garbage(&self, page: PageId) -> bool {
        self.state.lock().unwrap().garbage.contains(&page.0)
    }

    pub fn stats(&self) -> ShadowStats {
        let st = self.state.lock().unwrap();
        ShadowStats {
            epoch: SnapshotEpoch(st.epoch),
            header_generation: st.generation,
            image_slot: st.image_slot,
            logical_capacity: self.layout.logical_capacity,
            physical_capacity: self.layout.capacity,
            data_pages: self.layout.data_pages(),
            mapped_pages: st.mapped,
            free_pages: st.free.free,
            garbage_pages: st.garbage.len() as u32,
            dirty_pages: st.stable_overrides.len() as u32,
            delta_pages_used: st.delta_cursor,
            delta_region_pages: self.layout.delta_pages,
            deltas_since_image: st.deltas_applied,
            page_table_bytes: (st.table.len() * std::mem::size_of::<u32>()) as u64,
        }
    }

    /// Checks table injectivity and free-list disjointness.
    pub fn check_invariants(&self) -> Result<()> {
        let st = self.state.lock().unwrap();
        let referenced = st.table.iter().copied().chain(st.stable_overrides.values().copied());
        for p in referenced.filter(|&p| p != UNMAPPED) {
            if st.free.is_free(p) {
                return Err(Error::Corrupt(format!("referenced physical page {p} is on the free list")));
            }
            if st.garbage.contains(&p) {
                return Err(Error::Corrupt(format!("referenced physical page {p} is garbage")));
            }
        }
        let current: Vec<u32> = st.table.iter().copied().filter(|&p| p != UNMAPPED).collect();
        let distinct: std::collections::HashSet<_> = current.iter().collect();
        if distinct.len() != current.len() {
            return Err(Error::Corrupt("page table is not injective".into()));
        }
        Ok(())
    }
}

/// Reads both header slots. Returns the valid one with the higher generation,
/// `None` for a never-formatted device, or an error if the slots hold data
/// but neither is valid.
fn latest_header(device: &dyn BlockDevice) -> Result<Option<Header>> {
    let slots = read_headers(device)?;
    let best = slots.iter().flatten().max_by_key(|h| h.generation).cloned();
    if best.is_some() {
        return Ok(best);
    }
    if device.read_page(PageId(0))?.is_zero() && device.read_page(PageId(1))?.is_zero() {
        Ok(None)
    } else {
        Err(Error::Corrupt("no valid header slot".into()))
    }
}

/// Decodes both header slots, for inspection.
pub fn read_headers(device: &dyn BlockDevice) -> Result<[Option<Header>; 2]> {
    Ok([Header::decode(&device.read_page(PageId(0))?), Header::decode(&device.read_page(PageId(1))?)])
}

fn write_image(device: &dyn BlockDevice, layout: &Layout, slot: u32, table: &[u32]) -> Result<u64> {
    let mut sum = Checksummer::new();
    for i in 0..layout.image_pages {
        let mut page = Page::zeroed();
        let from = i as usize * ENTRIES_PER_IMAGE_PAGE;
        for (j, &p) in table.iter().skip(from).take(ENTRIES_PER_IMAGE_PAGE).enumerate() {
            page[j * 4..j * 4 + 4].copy_from_slice(&p.to_le_bytes());
        }
        sum.update(&page);
        device.write_page(PageId(layout.image_start(slot) + i), &page)?;
    }
    Ok(sum.finish())
}

fn read_image(device: &dyn BlockDevice, layout: &Layout, header: &Header) -> Result<Vec<u32>> {
    let mut sum = Checksummer::new();
    let mut table = Vec::with_capacity(layout.logical_capacity as usize);
    for i in 0..layout.image_pages {
        let page = device.read_page(PageId(layout.image_start(header.image_slot) + i))?;
        sum.update(&page);
        table.extend(page.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())));
    }
    if sum.finish() != header.image_checksum {
        return Err(Error::Corrupt(format!("page-table image in slot {} fails its checksum", header.image_slot)));
    }
    table.truncate(layout.logical_capacity as usize);
    Ok(table)
}

/// Reads the delta record starting at `cursor` if it is complete, carries
/// sequence number `expected` and passes its checksums. Returns its pairs and
/// the number of pages it spans.
fn read_delta(
    device: &dyn BlockDevice,
    layout: &Layout,
    cursor: u32,
    expected: u64,
) -> Result<Option<(Vec<(u32, u32)>, u32)>> {
    if cursor >= layout.delta_pages {
        return Ok(None);
    }
    let first = device.read_page(PageId(layout.delta_start() + cursor))?;
    let Some(head) = DeltaPart::decode(&first) else { return Ok(None) };
    if head.seq != expected || head.part != 0 || head.parts == 0 {
        return Ok(None);
    }
    let parts = head.parts as u32;
    if cursor + parts > layout.delta_pages {
        return Ok(None);
    }
    let mut pairs = head.pairs;
    for i in 1..parts {
        let page = device.read_page(PageId(layout.delta_start() + cursor + i))?;
        match DeltaPart::decode(&page) {
            Some(part) if part.seq == expected && part.part as u32 == i && part.parts == head.parts => {
                pairs.extend(part.pairs)
            }
            _ => return Ok(None),
        }
    }
    Ok(Some((pairs, parts)))
}
