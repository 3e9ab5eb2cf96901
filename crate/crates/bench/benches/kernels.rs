#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hdistill_core::diagnostics::{avg_head_distance, nmi};
use hdistill_core::masking::redundant_select;
use hdistill_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Row-stochastic `[H, N, N]` attention.
fn attention(heads: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..heads * n * n).map(|_| rng.gen::<f64>()).collect();
    for row in a.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    // Token-by-width products as they appear in a desk-scale block.
    for &(b, n, d) in &[(64usize, 64usize, 96usize), (64, 45, 96), (64, 64, 192)] {
        let x = Tensor::<f32>::from_f64([b, n, d], &random(&[b, n, d], &mut rng)).unwrap();
        let w = Tensor::<f32>::from_f64([d, d], &random(&[d, d], &mut rng)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{b}x{n}x{d}")), &(), |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wv = tape.param(w.clone());
                let y = tape.matmul(xv, wv).unwrap();
                let loss = tape.sum(y).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn diagnostics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = attention(4, 64, &mut rng);
    c.bench_function("nmi_h4_n64", |b| b.iter(|| nmi(black_box(&a), 64).unwrap()));
    c.bench_function("avg_head_distance_h4_n64", |b| {
        b.iter(|| avg_head_distance(black_box(&a), 8).unwrap())
    });
}

fn masking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = random(&[256, 96], &mut rng);
    c.bench_function("redundant_select_n256_d96", |b| {
        b.iter(|| redundant_select(black_box(&rows), 256, 96, 0.3).unwrap())
    });
}

criterion_group!(benches, matmul, diagnostics, masking);
criterion_main!(benches);
