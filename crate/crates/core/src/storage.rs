//! Page-granular block devices.
//!
//! Two backends implement [`BlockDevice`]: [`FileDevice`] maps page `p` to byte
//! offset `p * PAGE_SIZE` of a single file, and [`CrashSimDevice`] keeps pages in
//! memory together with a log of every write and sync so that post-crash device
//! images can be produced for any prefix of that log.
//!
//! Crash model: a page write is atomic (no torn pages). On a crash every write
//! issued before the most recent completed `sync` survives, and any subset of
//! the writes issued after it survives. Within the chosen subset the last write
//! to a page wins.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::ops::{Deref, DerefMut};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAGE_SIZE: usize = 4096;

/// Index of a physical page within the database file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageId(pub u32);

impl PageId {
    pub fn offset(self) -> u64 {
        self.0 as u64 * PAGE_SIZE as u64
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A single `PAGE_SIZE` buffer.
#[derive(Clone, PartialEq, Eq)]
pub struct Page(Box<[u8; PAGE_SIZE]>);

impl Page {
    pub fn zeroed() -> Page {
        Page(Box::new([0u8; PAGE_SIZE]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Page> {
        if bytes.len() != PAGE_SIZE {
            return Err(Error::ShortPage { expected: PAGE_SIZE, actual: bytes.len() });
        }
        let mut page = Page::zeroed();
        page.0.copy_from_slice(bytes);
        Ok(page)
    }

    /// Copies `bytes` into the front of a zeroed page; longer input is an error.
    pub fn with_prefix(bytes: &[u8]) -> Result<Page> {
        if bytes.len() > PAGE_SIZE {
            return Err(Error::InvalidArgument(format!("{} bytes do not fit a page", bytes.len())));
        }
        let mut page = Page::zeroed();
        page.0[..bytes.len()].copy_from_slice(bytes);
        Ok(page)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }
}

impl Deref for Page {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        &self.0[..]
    }
}

impl DerefMut for Page {
    fn deref_mut(&mut self) -> &mut [u8] {
        &mut self.0[..]
    }
}

impl fmt::Debug for Page {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nonzero = self.0.iter().filter(|&&b| b != 0).count();
        write!(f, "Page({nonzero} nonzero bytes, head {:02x?})", &self.0[..8])
    }
}

/// A fixed-capacity array of pages.
///
/// Reads and writes on distinct pages may run concurrently. Writes to the same
/// page must be serialized by the caller.
pub trait BlockDevice: Send + Sync {
    /// Number of addressable pages.
    fn capacity(&self) -> u32;

    fn read_page(&self, id: PageId) -> Result<Page>;

    fn write_page(&self, id: PageId, page: &Page) -> Result<()>;

    /// Makes every previously issued write durable and orders it before any
    /// later write.
    fn sync(&self) -> Result<()>;
}

fn check_range(id: PageId, capacity: u32) -> Result<()> {
    if id.0 >= capacity {
        Err(Error::PageOutOfRange(id, capacity))
    } else {
        Ok(())
    }
}

/// Single-file backend. Pages that were never written read as zeros.
pub struct FileDevice {
    file: File,
    capacity: u32,
    // writers share, sync is exclusive
    barrier: RwLock<()>,
}

impl FileDevice {
    /// Opens or creates the file at `path`. The file grows lazily up to
    /// `capacity` pages.
    pub fn open(path: impl AsRef<Path>, capacity: u32) -> Result<FileDevice> {
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        Ok(FileDevice { file, capacity, barrier: RwLock::new(()) })
    }

    pub fn file_len(&self) -> Result<u64> {
        Ok(self.file.metadata()?.len())
    }
}

impl BlockDevice for FileDevice {
    fn capacity(&self) -> u32 {
        self.capacity
    }

    fn read_page(&self, id: PageId) -> Result<Page> {
        check_range(id, self.capacity)?;
        let mut page = Page::zeroed();
        let len = self.file.metadata()?.len();
        if id.offset() >= len {
            return Ok(page);
        }
        let available = (len - id.offset()).min(PAGE_SIZE as u64) as usize;
        self.file.read_exact_at(&mut page[..available], id.offset())?;
        Ok(page)
    }

    fn write_page(&self, id: PageId, page: &Page) -> Result<()> {
        check_range(id, self.capacity)?;
        let _shared = self.barrier.read().unwrap();
        self.file.write_all_at(page, id.offset())?;
        Ok(())
    }

    fn sync(&self) -> Result<()> {
        let _exclusive = self.barrier.write().unwrap();
        self.file.sync_data()?;
        Ok(())
    }
}

/// One entry of the crash simulator's operation log.
#[derive(Clone, Debug)]
pub enum DeviceOp {
    Write(PageId, Arc<Page>),
    Sync,
}

/// Which of the writes issued since the last sync survive a crash.
#[derive(Clone, Debug)]
pub enum SubsetChoice {
    All,
    Nothing,
    /// One flag per pending write, in issue order. Missing flags count as `false`.
    Mask(Vec<bool>),
    /// Each pending write survives independently with probability 1/2.
    Seeded(u64),
}

impl SubsetChoice {
    fn select(&self, pending: usize) -> Vec<bool> {
        match self {
            SubsetChoice::All => vec![true; pending],
            SubsetChoice::Nothing => vec![false; pending],
            SubsetChoice::Mask(mask) => (0..pending).map(|i| mask.get(i).copied().unwrap_or(false)).collect(),
            SubsetChoice::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..pending).map(|_| rng.gen_bool(0.5)).collect()
            }
        }
    }
}

#[derive(Default)]
struct SimState {
    // content the log starts from; always durable
    base: HashMap<PageId, Arc<Page>>,
    live: HashMap<PageId, Arc<Page>>,
    log: Vec<DeviceOp>,
    fail_sync: bool,
}

/// In-memory device that records every write and sync barrier.
///
/// [`CrashSimDevice::crash_image`] reconstructs the device as it could look
/// after a crash at any point of the recorded log.
pub struct CrashSimDevice {
    capacity: u32,
    state: Mutex<SimState>,
}

impl CrashSimDevice {
    pub fn new(capacity: u32) -> CrashSimDevice {
        CrashSimDevice { capacity, state: Mutex::new(SimState::default()) }
    }

    fn from_content(capacity: u32, content: HashMap<PageId, Arc<Page>>) -> CrashSimDevice {
        let state = SimState { base: content.clone(), live: content, log: Vec::new(), fail_sync: false };
        CrashSimDevice { capacity, state: Mutex::new(state) }
    }

    /// Number of operations (writes and syncs) recorded so far.
    pub fn op_count(&self) -> usize {
        self.state.lock().unwrap().log.len()
    }

    pub fn ops(&self) -> Vec<DeviceOp> {
        self.state.lock().unwrap().log.clone()
    }

    /// Makes subsequent `sync` calls fail with [`Error::SyncFailed`].
    pub fn set_fail_sync(&self, fail: bool) {
        self.state.lock().unwrap().fail_sync = fail;
    }

    /// Number of writes issued after the last sync among the first `at` ops.
    pub fn pending_at(&self, at: usize) -> usize {
        let state = self.state.lock().unwrap();
        let at = at.min(state.log.len());
        let open_epoch = last_sync_end(&state.log[..at]);
        state.log[open_epoch..at].iter().filter(|op| matches!(op, DeviceOp::Write(..))).count()
    }

    /// Builds the device a crash after the first `at` recorded operations
    /// could leave behind. The new device starts with an empty log.
    pub fn crash_image(&self, at: usize, choice: &SubsetChoice) -> CrashSimDevice {
        let state = self.state.lock().unwrap();
        let content = crash_content(&state.base, &state.log, at, choice);
        CrashSimDevice::from_content(self.capacity, content)
    }

    /// Crashes this device in place at the end of its log.
    pub fn crash(&self, choice: &SubsetChoice) {
        let mut state = self.state.lock().unwrap();
        let at = state.log.len();
        let content = crash_content(&state.base, &state.log, at, choice);
        state.base = content.clone();
        state.live = content;
        state.log.clear();
    }

    /// Drops the log and treats the current live view as durable.
    pub fn checkpoint_log(&self) {
        let mut state = self.state.lock().unwrap();
        state.base = state.live.clone();
        state.log.clear();
    }
}

/// Index just past the last `Sync` in `ops`, or 0.
fn last_sync_end(ops: &[DeviceOp]) -> usize {
    ops.iter().rposition(|op| matches!(op, DeviceOp::Sync)).map_or(0, |i| i + 1)
}

fn crash_content(
    base: &HashMap<PageId, Arc<Page>>,
    log: &[DeviceOp],
    at: usize,
    choice: &SubsetChoice,
) -> HashMap<PageId, Arc<Page>> {
    let at = at.min(log.len());
    let open_epoch = last_sync_end(&log[..at]);
    let mut content = base.clone();
    for op in &log[..open_epoch] {
        if let DeviceOp::Write(id, page) = op {
            content.insert(*id, page.clone());
        }
    }
    let pending: Vec<_> = log[open_epoch..at]
        .iter()
        .filter_map(|op| match op {
            DeviceOp::Write(id, page) => Some((*id, page.clone())),
            DeviceOp::Sync => None,
        })
        .collect();
    for (keep, (id, page)) in choice.select(pending.len()).into_iter().zip(pending) {
        if keep {
            content.insert(id, page);
        }
    }
    content
}

impl BlockDevice for CrashSimDevice {
    fn capacity(&self) -> u32 {
        self.capacity
    }

    fn read_page(&self, id: PageId) -> Result<Page> {
        check_range(id, self.capacity)?;
        let state = self.state.lock().unwrap();
        Ok(state.live.get(&id).map(|p| (**p).clone()).unwrap_or_else(Page::zeroed))
    }

    fn write_page(&self, id: PageId, page: &Page) -> Result<()> {
        check_range(id, self.capacity)?;
        let page = Arc::new(page.clone());
        let mut state = self.state.lock().unwrap();
        state.live.insert(id, page.clone());
        state.log.push(DeviceOp::Write(id, page));
        Ok(())
    }

    fn sync(&self) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        if state.fail_sync {
            return Err(Error::SyncFailed);
        }
        state.log.push(DeviceOp::Sync);
        Ok(())
    }
}
