use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pir_core::client::{ClientConfig, ClientState};
use pir_core::ggm::{default_max_attempts, puncture, resample};
use pir_core::harness::naive_answer;
use pir_core::{answer, Database, Geometry, IndexConstraint, PrpKey, Seed, TreePath};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn server_answer(c: &mut Criterion) {
    let mut group = c.benchmark_group("server_answer");
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for levels in [4u32, 6, 8, 10] {
        let g = Geometry::new(levels);
        let db = Database::random(g, 32, &mut rng);
        let key = puncture(&Seed::random(&mut rng), &TreePath::new(rng.random_range(0..g.sqrt_n()), levels));
        group.bench_with_input(BenchmarkId::from_parameter(g.n()), &key, |b, key| {
            b.iter(|| answer(&db, black_box(key)).unwrap())
        });
    }
    group.finish();

    // the per-candidate baseline is quadratic, keep it small
    let mut group = c.benchmark_group("naive_answer");
    group.sample_size(10);
    for levels in [4u32, 6] {
        let g = Geometry::new(levels);
        let db = Database::random(g, 32, &mut rng);
        let key = puncture(&Seed::random(&mut rng), &TreePath::new(0, levels));
        group.bench_with_input(BenchmarkId::from_parameter(g.n()), &key, |b, key| {
            b.iter(|| naive_answer(&db, black_box(key)))
        });
    }
    group.finish();
}

fn ggm(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let levels = 6;
    let key = Seed::random(&mut rng);
    let at = TreePath::new(0b101100, levels);
    c.bench_function("puncture/t=6", |b| b.iter(|| puncture(black_box(&key), &at)));

    let punctured = puncture(&key, &at);
    let positive = IndexConstraint::positive(0b001011, 17);
    let negatives: Vec<_> = (0..4).map(|i| IndexConstraint::negative(i, 3 * i)).collect();
    c.bench_function("resample/t=6/4 negatives", |b| {
        b.iter(|| {
            resample(&punctured, &at, &positive, &negatives, levels, default_max_attempts(levels, 4), &mut rng)
                .unwrap()
        })
    });
}

fn client_preprocessing(c: &mut Criterion) {
    let mut group = c.benchmark_group("client_ingest_chunk");
    group.sample_size(10);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for levels in [4u32, 6] {
        let g = Geometry::new(levels);
        let db = Database::random(g, 32, &mut rng);
        group.bench_function(BenchmarkId::from_parameter(g.n()), |b| {
            b.iter_with_setup(
                || ClientState::new(g, 32, PrpKey([0; 16]), ClientConfig::default()),
                |mut state| state.ingest_chunk(0, db.chunk_bytes(0).unwrap()).unwrap(),
            )
        });
    }
    group.finish();
}

criterion_group!(benches, server_answer, ggm, client_preprocessing);
criterion_main!(benches);
