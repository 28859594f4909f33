//! Embedded transactional key-value engine whose commits become durable only
//! at explicit persists.
//!
//! A [`txn::Engine`] runs serializable transactions over a two-level index
//! (a concurrent skip list in front of a B+-tree) stored through a shadow
//! paging layer. [`txn::Engine::persist`] makes every transaction committed
//! before it durable; a crash recovers exactly the state of the last
//! completed persist.

mod checksum;
pub mod error;
pub mod harness;
pub mod index;
pub mod shadow;
pub mod storage;
pub mod txn;
pub mod workload;

pub use error::{Error, Result};
pub use index::{IndexConfig, RecordLocation};
pub use shadow::{ShadowConfig, SnapshotEpoch};
pub use storage::{BlockDevice, CrashSimDevice, FileDevice, SubsetChoice, PAGE_SIZE};
pub use txn::{CommitInfo, Engine, EngineConfig, EngineStats, Transaction};
