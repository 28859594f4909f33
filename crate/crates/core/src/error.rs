use std::io;

use crate::shadow::LogicalAddr;
use crate::storage::PageId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("page {0:?} is outside the device (capacity {1} pages)")]
    PageOutOfRange(PageId, u32),

    #[error("logical address {0:?} is outside the logical capacity {1}")]
    AddrOutOfRange(LogicalAddr, u32),

    #[error("short page: expected {expected} bytes, got {actual}")]
    ShortPage { expected: usize, actual: usize },

    #[error("simulated sync failure")]
    SyncFailed,

    #[error("device full: no free physical page after garbage collection")]
    DeviceFull,

    #[error("logical space exhausted")]
    LogicalSpaceFull,

    #[error("database is corrupt: {0}")]
    Corrupt(String),

    #[error("record location belongs to epoch {found}, current epoch is {current}")]
    StaleLocation { found: u64, current: u64 },

    #[error("skip list arena is full; a persist is required")]
    SkipListFull,

    #[error("key already indexed")]
    DuplicateKey,

    #[error("transaction aborted on lock conflict")]
    Aborted,

    #[error("invalid transaction state: {0}")]
    InvalidState(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Lock conflicts under the no-wait policy are the only retryable failure.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Aborted)
    }
}
