use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::shadow::{Layout, ShadowConfig};
use crate::storage::{BlockDevice, CrashSimDevice};

const LOGICAL: u32 = 4096;
const DELTA: u32 = 64;

fn device() -> Arc<CrashSimDevice> {
    Arc::new(CrashSimDevice::new(Layout::required_capacity(LOGICAL, DELTA, 3 * LOGICAL)))
}

fn open_on(dev: Arc<CrashSimDevice>, config: IndexConfig) -> Index {
    let dev: Arc<dyn BlockDevice> = dev;
    let shadow = Shadow::open(dev, &ShadowConfig { logical_capacity: LOGICAL, delta_region_pages: DELTA }).unwrap();
    Index::open(Arc::new(shadow), config).unwrap()
}

fn fresh(config: IndexConfig) -> Index {
    open_on(device(), config)
}

fn k(n: u64) -> Vec<u8> {
    n.to_be_bytes().to_vec()
}

fn leaf(keys: &[u64]) -> TreeLayout {
    TreeLayout::Leaf(keys.iter().map(|&n| (k(n), b"v".to_vec())).collect())
}

fn inner(children: Vec<(Option<u64>, TreeLayout)>) -> TreeLayout {
    TreeLayout::Internal(children.into_iter().map(|(s, c)| (s.map(k), c)).collect())
}

fn keep_none(_: &[u8]) -> bool {
    false
}

/// Input tree and list of the worked merge example, with two entries per node.
fn merge_example() -> Index {
    let index = fresh(IndexConfig { max_node_entries: 2, ..IndexConfig::default() });
    let tree = inner(vec![
        (Some(24), inner(vec![(Some(24), leaf(&[17, 24]))])),
        (None, inner(vec![(Some(35), leaf(&[35])), (None, leaf(&[37, 50]))])),
    ]);
    index.install_layout(&tree).unwrap();
    for n in [8, 14, 18, 31, 36, 40] {
        index.insert(&k(n), b"v".to_vec()).unwrap();
    }
    index
}

#[test]
fn empty_index_finds_nothing() {
    let index = fresh(IndexConfig::default());
    assert!(index.search(b"a").unwrap().is_none());
}

#[test]
fn inserted_key_is_found_in_list() {
    let index = fresh(IndexConfig::default());
    index.insert(b"a", b"1".to_vec()).unwrap();
    let (v, loc) = index.search(b"a").unwrap().unwrap();
    assert_eq!(*v, b"1");
    assert!(matches!(loc, RecordLocation::List { .. }));
}

#[test]
fn example_lookups_distinguish_list_and_tree() {
    let index = merge_example();
    index.check_invariants(true).unwrap();
    assert!(matches!(index.search(&k(31)).unwrap().unwrap().1, RecordLocation::List { .. }));
    assert!(matches!(index.search(&k(17)).unwrap().unwrap().1, RecordLocation::Tree { .. }));
}

#[test]
fn example_merge_assigns_31_to_leaf_ending_at_35() {
    let index = merge_example();
    let RecordLocation::Tree { leaf: before, .. } = index.search(&k(35)).unwrap().unwrap().1 else { panic!() };
    index.merge(&keep_none).unwrap();
    let RecordLocation::Tree { leaf: l31, .. } = index.search(&k(31)).unwrap().unwrap().1 else { panic!() };
    let RecordLocation::Tree { leaf: l35, .. } = index.search(&k(35)).unwrap().unwrap().1 else { panic!() };
    assert_eq!(l31, before);
    assert_eq!(l35, before);
}

#[test]
fn example_merge_produces_expected_tree() {
    let index = merge_example();
    let stats = index.merge(&keep_none).unwrap();
    assert_eq!(stats.new_roots, 1);
    let expected = inner(vec![
        (
            Some(24),
            inner(vec![
                (Some(8), inner(vec![(Some(8), leaf(&[8]))])),
                (Some(24), inner(vec![(Some(17), leaf(&[14, 17])), (Some(24), leaf(&[18, 24]))])),
            ]),
        ),
        (
            None,
            inner(vec![
                (Some(35), inner(vec![(Some(35), leaf(&[31, 35]))])),
                (None, inner(vec![(Some(37), leaf(&[36, 37])), (None, leaf(&[40, 50]))])),
            ]),
        ),
    ]);
    assert_eq!(index.layout().unwrap(), expected);
    assert_eq!(index.height(), 4);
    assert_eq!(index.list_len(), 0);
    index.check_invariants(true).unwrap();
}

#[test]
fn range_returns_records_and_gap_successor() {
    let index = fresh(IndexConfig::default());
    for n in [1, 4, 8] {
        index.insert(&k(n), b"x".to_vec()).unwrap();
    }
    let check = |index: &Index| {
        let r = index.range(&k(3), &k(6)).unwrap();
        assert_eq!(r.records.iter().map(|r| r.key.clone()).collect::<Vec<_>>(), vec![k(4)]);
        assert_eq!(r.successor, Some(k(8)));
        let r = index.range(&k(9), &k(20)).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.successor, None);
    };
    check(&index);
    index.merge(&keep_none).unwrap();
    check(&index);
}

#[test]
fn range_rejects_inverted_bounds() {
    let index = fresh(IndexConfig::default());
    assert!(matches!(index.range(b"b", b"a"), Err(Error::InvalidArgument(_))));
}

#[test]
fn range_successor_is_k2_when_present() {
    let index = fresh(IndexConfig::default());
    for n in [2, 5] {
        index.insert(&k(n), b"x".to_vec()).unwrap();
    }
    assert_eq!(index.range(&k(1), &k(5)).unwrap().successor, Some(k(5)));
}

#[test]
fn update_list_location_changes_value() {
    let index = fresh(IndexConfig::default());
    let loc = index.insert(b"a", b"1".to_vec()).unwrap();
    index.update(loc, b"2".to_vec()).unwrap();
    assert_eq!(*index.search(b"a").unwrap().unwrap().0, b"2");
}

#[test]
fn update_tree_location_in_page() {
    let index = fresh(IndexConfig::default());
    index.insert(b"a", b"1".to_vec()).unwrap();
    index.merge(&keep_none).unwrap();
    let hash = index.structure_hash().unwrap();
    let (_, loc) = index.search(b"a").unwrap().unwrap();
    index.update(loc, b"9".to_vec()).unwrap();
    assert_eq!(*index.search(b"a").unwrap().unwrap().0, b"9");
    assert_eq!(index.structure_hash().unwrap(), hash);
    assert_eq!(index.pending_writes().len(), 1);
}

#[test]
fn growing_update_keeps_structure_until_merge() {
    let index = fresh(IndexConfig::default());
    for i in 0..4u64 {
        index.insert(&k(i), vec![1; 800]).unwrap();
    }
    index.merge(&keep_none).unwrap();
    index.checkpoint().unwrap();
    assert_eq!(index.stats().height, 1);
    let hash = index.structure_hash().unwrap();
    for i in 0..4u64 {
        let (_, loc) = index.search(&k(i)).unwrap().unwrap();
        index.update(loc, vec![2; 1300]).unwrap();
    }
    assert_eq!(index.structure_hash().unwrap(), hash);
    let report = index.check_invariants(false).unwrap();
    assert_eq!(report.oversized_leaves, 1);
    assert!(index.check_invariants(true).is_err());
    index.merge(&keep_none).unwrap();
    index.check_invariants(true).unwrap();
    assert_eq!(index.height(), 2);
    for i in 0..4u64 {
        assert_eq!(*index.search(&k(i)).unwrap().unwrap().0, vec![2; 1300]);
    }
}

#[test]
fn stale_location_rejected() {
    let index = fresh(IndexConfig::default());
    let loc = index.insert(b"a", b"1".to_vec()).unwrap();
    index.merge(&keep_none).unwrap();
    assert!(matches!(index.update(loc, b"2".to_vec()), Err(Error::StaleLocation { .. })));
}

#[test]
fn empty_merge_leaves_tree_identical() {
    let index = merge_example();
    index.merge(&keep_none).unwrap();
    index.checkpoint().unwrap();
    let before = (index.layout().unwrap(), index.structure_hash().unwrap());
    let stats = index.merge(&keep_none).unwrap();
    assert_eq!(stats.leaves_touched, 0);
    assert!(index.pending_writes().is_empty());
    assert_eq!((index.layout().unwrap(), index.structure_hash().unwrap()), before);
}

#[test]
fn checkpoint_without_changes_writes_nothing() {
    let index = fresh(IndexConfig::default());
    index.checkpoint().unwrap();
    assert_eq!(index.checkpoint().unwrap(), CheckpointStats::default());
}

#[test]
fn checkpoint_covers_exactly_touched_nodes() {
    let index = fresh(IndexConfig { max_node_entries: 4, ..IndexConfig::default() });
    for i in 0..64u64 {
        index.insert(&k(i * 10), b"v".to_vec()).unwrap();
    }
    index.merge(&keep_none).unwrap();
    index.checkpoint().unwrap();
    let leaf_of_key = |n: u64| match index.search(&k(n)).unwrap().unwrap().1 {
        RecordLocation::Tree { leaf, .. } => leaf,
        other => panic!("{other:?}"),
    };
    // One key into an unfilled leaf touches only that leaf.
    let target = leaf_of_key(0);
    index.merge(&keep_none).unwrap();
    let (_, loc) = index.search(&k(0)).unwrap().unwrap();
    index.update(loc, b"w".to_vec()).unwrap();
    assert_eq!(index.pending_writes(), vec![target]);
    index.insert(&k(1), b"v".to_vec()).unwrap();
    index.merge(&keep_none).unwrap();
    let pending = index.pending_writes();
    assert!(pending.contains(&target));
    assert!(pending.len() <= 1 + 2 + index.height() as usize, "{pending:?}");
    let written = index.checkpoint().unwrap();
    assert_eq!(written.nodes_written, pending.len());
}

#[test]
fn tombstone_for_unpersisted_key_is_dropped() {
    let index = fresh(IndexConfig::default());
    index.insert(b"a", Vec::new()).unwrap();
    let stats = index.merge(&keep_none).unwrap();
    assert_eq!(stats.tombstones_dropped, 1);
    assert!(index.search(b"a").unwrap().is_none());
}

#[test]
fn tombstone_over_tree_record_removes_it() {
    let index = fresh(IndexConfig::default());
    index.insert(b"a", b"1".to_vec()).unwrap();
    index.insert(b"b", b"2".to_vec()).unwrap();
    index.merge(&keep_none).unwrap();
    let (_, loc) = index.search(b"a").unwrap().unwrap();
    index.update(loc, Vec::new()).unwrap();
    index.merge(&keep_none).unwrap();
    assert!(index.search(b"a").unwrap().is_none());
    assert_eq!(index.contents().unwrap(), vec![(b"b".to_vec(), b"2".to_vec())]);
}

#[test]
fn retained_tombstone_survives_merge() {
    let index = fresh(IndexConfig::default());
    index.insert(b"a", Vec::new()).unwrap();
    index.merge(&|key: &[u8]| key == b"a").unwrap();
    let (v, _) = index.search(b"a").unwrap().unwrap();
    assert!(v.is_empty());
}

#[test]
fn large_values_round_trip_through_overflow_pages() {
    let dev = device();
    let big: Vec<u8> = (0..20_000u32).map(|i| i as u8).collect();
    {
        let index = open_on(dev.clone(), IndexConfig::default());
        index.insert(b"big", big.clone()).unwrap();
        index.insert(b"small", b"s".to_vec()).unwrap();
        index.merge(&keep_none).unwrap();
        let stats = index.checkpoint().unwrap();
        assert_eq!(stats.overflow_pages_written, 5);
        // Unchanged value keeps its chain.
        let (_, loc) = index.search(b"small").unwrap().unwrap();
        index.update(loc, b"t".to_vec()).unwrap();
        index.merge(&keep_none).unwrap();
        assert_eq!(index.checkpoint().unwrap().overflow_pages_written, 0);
        index.shadow().flush().unwrap();
    }
    let index = open_on(dev, IndexConfig::default());
    assert_eq!(*index.search(b"big").unwrap().unwrap().0, big);
    assert_eq!(*index.search(b"small").unwrap().unwrap().0, b"t");
}

#[test]
fn key_and_value_limits_enforced() {
    let index = fresh(IndexConfig::default());
    assert!(index.insert(b"", b"v".to_vec()).is_err());
    assert!(index.insert(&vec![1; MAX_KEY + 1], b"v".to_vec()).is_err());
    assert!(index.insert(b"k", vec![0; MAX_VALUE + 1]).is_err());
    index.insert(&vec![1; MAX_KEY], vec![0; MAX_VALUE]).unwrap();
}

#[test]
fn checkpoint_flush_reopen_preserves_tree() {
    let dev = device();
    let (layout, hash) = {
        let index = open_on(dev.clone(), IndexConfig::default());
        for i in 0..3000u64 {
            index.insert(&k(i * 7 % 3001), vec![(i % 251) as u8; 40]).unwrap();
        }
        index.merge(&keep_none).unwrap();
        index.checkpoint().unwrap();
        index.shadow().flush().unwrap();
        (index.layout().unwrap(), index.structure_hash().unwrap())
    };
    let index = open_on(dev, IndexConfig::default());
    assert_eq!(index.layout().unwrap(), layout);
    assert_eq!(index.structure_hash().unwrap(), hash);
    assert_eq!(index.stats().persisted_records, 3000);
    index.check_invariants(true).unwrap();
}

#[test]
fn eviction_reloads_leaves_from_pages() {
    let index = fresh(IndexConfig { cache_bytes: Some(8 * PAGE_SIZE), ..IndexConfig::default() });
    for i in 0..2000u64 {
        index.insert(&k(i), vec![7; 100]).unwrap();
    }
    index.merge(&keep_none).unwrap();
    index.checkpoint().unwrap();
    assert!(index.evict() > 0);
    assert!(index.stats().cached_bytes <= 8 * PAGE_SIZE);
    let expected: Vec<(Vec<u8>, Vec<u8>)> = (0..2000u64).map(|i| (k(i), vec![7; 100])).collect();
    assert_eq!(index.contents().unwrap(), expected);
}

/// Applies random inserts, updates and deletes with a merge after each round
/// and compares against a sorted map.
fn run_oracle(seed: u64, rounds: usize, ops: usize, config: IndexConfig) -> (Index, BTreeMap<Vec<u8>, Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = fresh(config);
    let mut oracle: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    for _ in 0..rounds {
        for _ in 0..ops {
            let key = k(rng.gen_range(0..400));
            let value = if rng.gen_bool(0.2) { Vec::new() } else { vec![rng.gen(); rng.gen_range(1..300)] };
            match index.search(&key).unwrap() {
                Some((_, loc)) => index.update(loc, value.clone()).unwrap(),
                None => {
                    index.insert(&key, value.clone()).unwrap();
                }
            }
            oracle.insert(key, value);
        }
        index.merge(&keep_none).unwrap();
        index.checkpoint().unwrap();
        oracle.retain(|_, v| !v.is_empty());
        let got: BTreeMap<Vec<u8>, Vec<u8>> = index.contents().unwrap().into_iter().collect();
        assert_eq!(got, oracle);
        index.check_invariants(true).unwrap();
    }
    (index, oracle)
}

#[test]
fn merge_matches_sorted_map_oracle() {
    for seed in 0..5 {
        run_oracle(seed, 6, 300, IndexConfig { max_node_entries: 6, ..IndexConfig::default() });
    }
    run_oracle(99, 4, 500, IndexConfig::default());
}

#[test]
fn parallel_merge_is_deterministic() {
    let single = run_oracle(5, 5, 400, IndexConfig { max_node_entries: 5, ..IndexConfig::default() }).0;
    let multi =
        run_oracle(5, 5, 400, IndexConfig { max_node_entries: 5, merge_workers: 4, ..IndexConfig::default() }).0;
    assert_eq!(single.layout().unwrap(), multi.layout().unwrap());
    assert_eq!(single.structure_hash().unwrap(), multi.structure_hash().unwrap());
}

#[test]
fn range_matches_oracle_on_three_key_windows() {
    let (index, oracle) = run_oracle(11, 3, 150, IndexConfig { max_node_entries: 4, ..IndexConfig::default() });
    // Add unmerged list records on top of the tree.
    let mut union = oracle.clone();
    for n in [3u64, 77, 150, 401] {
        let key = k(n);
        if index.search(&key).unwrap().is_none() {
            index.insert(&key, b"L".to_vec()).unwrap();
            union.insert(key, b"L".to_vec());
        }
    }
    let keys: Vec<Vec<u8>> = union.keys().cloned().collect();
    for w in keys.windows(3) {
        for (lo, hi) in [(&w[0], &w[2]), (&w[1], &w[1]), (&w[0], &w[1])] {
            let r = index.range(lo, hi).unwrap();
            let expected: Vec<(Vec<u8>, Vec<u8>)> =
                union.range(lo.clone()..=hi.clone()).map(|(k, v)| (k.clone(), v.clone())).collect();
            let got: Vec<(Vec<u8>, Vec<u8>)> = r.records.iter().map(|r| (r.key.clone(), (*r.value).clone())).collect();
            assert_eq!(got, expected);
            assert_eq!(r.successor, union.range(hi.clone()..).next().map(|(k, _)| k.clone()));
        }
    }
}
