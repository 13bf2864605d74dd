use criterion::{criterion_group, criterion_main, Criterion};
use duiit_core::metrics::{fid_from_features, inception_score_from_probs, matrix_sqrt_product, softmax};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for d in [16, 64] {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let (sa, sb) = (&a * a.transpose(), &b * b.transpose());
        c.bench_function(&format!("matrix_sqrt_product/d{d}"), |bch| bch.iter(|| matrix_sqrt_product(&sa, &sb).unwrap()));
        let (fa, fb) = (rows(&mut rng, 1000, d), rows(&mut rng, 1000, d));
        c.bench_function(&format!("fid_from_features/n1000_d{d}"), |bch| bch.iter(|| fid_from_features(&fa, &fb).unwrap()));
    }
    let probs: Vec<Vec<f64>> = rows(&mut rng, 1000, 10).iter().map(|l| softmax(l)).collect();
    c.bench_function("inception_score/n1000_k10", |b| b.iter(|| inception_score_from_probs(&probs, 10).unwrap()));
}

criterion_group!(benches, metrics);
criterion_main!(benches);
