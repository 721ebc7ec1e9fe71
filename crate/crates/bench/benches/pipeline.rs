use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use termid::ctg::EmbeddingIndex;
use termid::grounding::StructuralSearch;
use termid::vocab::{kmeans, KMeansConfig};
use termid_bench::{alphabet, random_embeddings, random_library, random_points, random_tid};

fn grounding(c: &mut Criterion) {
    let mut group = c.benchmark_group("ground_structural");
    for items in [1_000, 10_000] {
        let lib = random_library(items, 500, 5, 1);
        let terms = alphabet(500);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let queries: Vec<_> = (0..64).map(|_| random_tid(&mut rng, &terms, 5)).collect();
        for (name, mode) in [("indexed", StructuralSearch::Indexed), ("exhaustive", StructuralSearch::Exhaustive)] {
            group.bench_with_input(BenchmarkId::new(name, items), &queries, |b, qs| {
                b.iter(|| {
                    for q in qs {
                        black_box(lib.ground_structural_with(q, mode));
                    }
                })
            });
        }
    }
    group.finish();
}

fn neighbors(c: &mut Criterion) {
    let index = EmbeddingIndex::new(random_embeddings(5_000, 128, 3)).unwrap();
    c.bench_function("top_k/5000x128", |b| {
        b.iter(|| black_box(index.top_k("item000042", 5).unwrap()))
    });
}

fn clustering(c: &mut Criterion) {
    let points = random_points(2_000, 32, 4);
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    group.bench_function("2000x32/k=64", |b| {
        b.iter(|| black_box(kmeans(&points, &KMeansConfig::new(64, 7)).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, grounding, neighbors, clustering);
criterion_main!(benches);
