use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use difftap::store::{FeatureStore, RecordKey};
use difftap_bench::feature;

fn roundtrip(c: &mut Criterion) {
    let f = feature(16, 16, 1280, 7);
    c.bench_function("store put 16x16x1280", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |dir| {
                let mut store = FeatureStore::open_or_create(dir.path(), "bench").unwrap();
                store.put_feature(&f, false).unwrap();
                dir
            },
            BatchSize::PerIteration,
        )
    });

    let dir = tempfile::tempdir().unwrap();
    let mut store = FeatureStore::open_or_create(dir.path(), "bench").unwrap();
    store.put_feature(&f, false).unwrap();
    let key = RecordKey::feature(&f.provenance);
    c.bench_function("store get 16x16x1280", |b| b.iter(|| store.get_feature::<f32>(&key).unwrap()));
}

criterion_group!(benches, roundtrip);
criterion_main!(benches);
