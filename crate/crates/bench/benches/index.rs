use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use weakkv::IndexConfig;
use weakkv_bench::{key, memory_index};

fn shuffled(n: u64) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..n).collect();
    ids.shuffle(&mut rand::rngs::StdRng::seed_from_u64(n));
    ids
}

fn skiplist_insert(c: &mut Criterion) {
    let ids = shuffled(10_000);
    c.bench_function("skiplist_insert_10k", |b| {
        b.iter_batched(
            || memory_index(1024, IndexConfig { skiplist_capacity: 1 << 14, ..IndexConfig::default() }),
            |index| {
                for &i in &ids {
                    index.insert(&key(i), vec![0; 100]).unwrap();
                }
                index
            },
            BatchSize::PerIteration,
        )
    });
}

fn merge(c: &mut Criterion) {
    let mut g = c.benchmark_group("merge");
    g.sample_size(20);
    for workers in [1usize, 4] {
        g.bench_with_input(BenchmarkId::new("10k_into_50k", workers), &workers, |b, &workers| {
            b.iter_batched(
                || {
                    let config = IndexConfig { skiplist_capacity: 1 << 16, merge_workers: workers, ..IndexConfig::default() };
                    let index = memory_index(8192, config);
                    for i in shuffled(50_000) {
                        index.insert(&key(i * 2), vec![0; 100]).unwrap();
                    }
                    index.merge(&|_| false).unwrap();
                    for i in shuffled(10_000) {
                        index.insert(&key(i * 10 + 1), vec![1; 100]).unwrap();
                    }
                    index
                },
                |index| {
                    index.merge(&|_| false).unwrap();
                    index
                },
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

fn search(c: &mut Criterion) {
    let index = memory_index(8192, IndexConfig { skiplist_capacity: 1 << 16, ..IndexConfig::default() });
    for i in shuffled(50_000) {
        index.insert(&key(i), vec![0; 100]).unwrap();
    }
    index.merge(&|_| false).unwrap();
    let probes = shuffled(50_000);
    let mut at = 0;
    c.bench_function("tree_search_50k", |b| {
        b.iter(|| {
            at = (at + 1) % probes.len();
            index.search(&key(probes[at])).unwrap()
        })
    });
}

criterion_group!(benches, skiplist_insert, merge, search);
criterion_main!(benches);
