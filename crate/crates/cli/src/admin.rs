use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use serde_json::json;
use weakkv::shadow::read_headers;
use weakkv::{Engine, EngineConfig, FileDevice, PAGE_SIZE};

use crate::Geometry;

pub fn create(path: &Path, geometry: &Geometry, records: u64, seed: u64) -> Result<()> {
    if path.exists() {
        bail!("{} already exists", path.display());
    }
    let config = geometry.config(records);
    let engine = Engine::open_path(path, config.clone())?;
    if records > 0 {
        weakkv::workload::preload(&engine, records, 16, 100, seed)?;
    }
    let epoch = engine.epoch();
    drop(engine);
    println!(
        "created {} ({} logical pages, {} device pages), {records} records, epoch {}",
        path.display(),
        config.shadow.logical_capacity,
        config.device_pages(),
        epoch.0
    );
    Ok(())
}

fn open_existing(path: &Path) -> Result<Engine> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    // geometry comes from the header; the config only supplies runtime knobs
    Ok(Engine::open_path(path, EngineConfig::default())?)
}

pub fn inspect(path: &Path, as_json: bool) -> Result<()> {
    let headers = read_headers(&FileDevice::open(path, 2)?)?;
    if headers.iter().all(Option::is_none) {
        bail!("{} has no valid header", path.display());
    }
    let engine = open_existing(path)?;
    let stats = engine.stats();
    let (s, i) = (&stats.shadow, &stats.index);
    let db_bytes = s.logical_capacity as u64 * PAGE_SIZE as u64;
    let slots: Vec<_> = headers
        .iter()
        .enumerate()
        .map(|(n, h)| match h {
            Some(h) => json!({"slot": n, "generation": h.generation, "image_slot": h.image_slot,
                              "image_epoch": h.image_epoch, "capacity": h.capacity}),
            None => json!({"slot": n, "valid": false}),
        })
        .collect();
    let report = json!({
        "epoch": s.epoch.0,
        "headers": slots,
        "logical_pages": s.logical_capacity,
        "device_pages": s.physical_capacity,
        "mapped_pages": s.mapped_pages,
        "free_pages": s.free_pages,
        "deltas_since_image": s.deltas_since_image,
        "delta_pages_used": s.delta_pages_used,
        "page_table_bytes": s.page_table_bytes,
        "page_table_fraction": s.page_table_bytes as f64 / (s.mapped_pages.max(1) as f64 * PAGE_SIZE as f64),
        "tree_height": i.height,
        "records": i.persisted_records,
        "allocated_logical_pages": i.allocated_pages,
        "database_bytes": db_bytes,
    });
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("database       {}", path.display());
    println!("epoch          {}", s.epoch.0);
    for h in headers.iter().flatten() {
        println!("header         generation {} image slot {} image epoch {}", h.generation, h.image_slot, h.image_epoch);
    }
    println!("logical pages  {} ({} mapped, {} allocated by the tree)", s.logical_capacity, s.mapped_pages, i.allocated_pages);
    println!("device pages   {} ({} free)", s.physical_capacity, s.free_pages);
    println!("deltas         {} since the last image ({} delta pages used)", s.deltas_since_image, s.delta_pages_used);
    println!(
        "page table     {} bytes (1/{:.0} of mapped data)",
        s.page_table_bytes,
        (s.mapped_pages.max(1) as f64 * PAGE_SIZE as f64) / s.page_table_bytes.max(1) as f64
    );
    println!("tree height    {}", i.height);
    println!("records        {}", i.persisted_records);
    Ok(())
}

pub fn recover(path: &Path, as_json: bool) -> Result<()> {
    let start = Instant::now();
    let engine = open_existing(path)?;
    let elapsed = start.elapsed();
    engine.index().check_invariants(false)?;
    let records = engine.index().contents()?.iter().filter(|(_, v)| !v.is_empty()).count();
    let epoch = engine.epoch().0;
    if as_json {
        println!(
            "{}",
            json!({"recovery_ms": elapsed.as_secs_f64() * 1e3, "records": records, "epoch": epoch})
        );
    } else {
        println!("recovered epoch {epoch} with {records} records in {:.3} ms", elapsed.as_secs_f64() * 1e3);
    }
    Ok(())
}
