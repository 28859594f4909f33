//! Setup shared by the criterion benches.

use std::path::PathBuf;
use std::sync::Arc;

use weakkv::index::Index;
use weakkv::shadow::{Layout, Shadow};
use weakkv::{CrashSimDevice, Engine, EngineConfig, IndexConfig, ShadowConfig};

/// An engine on a file in the temp directory, removed on drop.
pub struct ScratchDb {
    pub engine: Engine,
    path: PathBuf,
}

impl Drop for ScratchDb {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn engine_config(records: u64) -> EngineConfig {
    let mut config = EngineConfig::default();
    config.shadow.logical_capacity = ((records * 124 * 4 / 4096) as u32).max(4096);
    config
}

/// A file-backed engine preloaded with `records` 16-byte keys and 100-byte
/// values, persisted.
pub fn scratch_engine(name: &str, records: u64) -> ScratchDb {
    let path = std::env::temp_dir().join(format!("weakkv-{name}-{}.db", std::process::id()));
    let _ = std::fs::remove_file(&path);
    let engine = Engine::open_path(&path, engine_config(records)).unwrap();
    weakkv::workload::preload(&engine, records, 16, 100, 7).unwrap();
    ScratchDb { engine, path }
}

/// An empty index on an in-memory device.
pub fn memory_index(logical: u32, config: IndexConfig) -> Index {
    let delta = 64;
    let device = Arc::new(CrashSimDevice::new(Layout::required_capacity(logical, delta, 3 * logical)));
    let shadow = Shadow::open(device, &ShadowConfig { logical_capacity: logical, delta_region_pages: delta }).unwrap();
    Index::open(Arc::new(shadow), config).unwrap()
}

pub fn key(i: u64) -> Vec<u8> {
    weakkv::workload::key_for(i, 16)
}
