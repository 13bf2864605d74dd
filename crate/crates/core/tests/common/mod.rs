#![allow(dead_code)]

pub mod oracle;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use duiit_core::nn::{Params, Precision};
use duiit_core::predictor::{LabeledBatch, PredictorConfig};
use duiit_core::translator::{DiscriminatorConfig, GeneratorConfig, GeneratorKind, TranslatorConfig};

pub const FD_STEP: f64 = 1e-5;

pub fn tiny_translator() -> TranslatorConfig {
    TranslatorConfig {
        generator: GeneratorConfig {
            channels: 1,
            resolution: (8, 8),
            base_filters: 2,
            n_downsampling: 1,
            n_residual_blocks: 1,
            edge_kernel: 3,
            kind: GeneratorKind::Resnet,
            init_std: 0.3,
        },
        discriminator: DiscriminatorConfig {
            channels: 1,
            resolution: (8, 8),
            base_filters: 2,
            n_layers: 1,
            init_std: 0.3,
        },
        buffer_capacity: 4,
    }
}

pub fn tiny_predictor() -> PredictorConfig {
    tiny_predictor_for((8, 8))
}

pub fn tiny_predictor_for(resolution: (usize, usize)) -> PredictorConfig {
    PredictorConfig {
        base_filters: 2,
        stages: vec![1, 1],
        stem_stride: 1,
        ..PredictorConfig::small(1, resolution)
    }
    .with_label_range(50.0, 20.0)
}

pub const PRECISION: Precision = Precision::F64;

pub fn images(n: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..n * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (n, 1, 8, 8), &Device::Cpu).unwrap()
}

pub fn batch(n: usize, seed: u64) -> LabeledBatch {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..90.0)).collect();
    LabeledBatch::new(images(n, seed), Tensor::new(labels, &Device::Cpu).unwrap()).unwrap()
}

/// Worst relative error between analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    pub analytic_norm: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps round-off on gradients
/// that are zero up to cancellation from dominating.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Compares `grads` for every element of `params` with central differences of `loss`.
pub fn fd_check(params: &[&Params], grads: &GradStore, floor: f64, loss: impl Fn() -> f64) -> FdReport {
    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
        analytic_norm: 0.0,
    };
    for p in params {
        for (name, var) in p.iter() {
            let analytic = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; var.elem_count()]);
            let base = flat(var.as_tensor());
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    set(var, &v);
                    loss()
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                set(var, &base);
                let r = rel_err(analytic[i], numeric, floor);
                report.analytic_norm += analytic[i] * analytic[i];
                report.checked += 1;
                if r > report.max_rel {
                    report.max_rel = r;
                    report.worst = format!("{name}[{i}] analytic {:.6e} numeric {:.6e}", analytic[i], numeric);
                }
            }
        }
    }
    report.analytic_norm = report.analytic_norm.sqrt();
    report
}

pub fn set(var: &Var, values: &[f64]) {
    let t = Tensor::from_vec(values.to_vec(), var.dims(), &Device::Cpu).unwrap();
    var.set(&t).unwrap();
}

pub fn value(t: &Tensor) -> f64 {
    duiit_core::nn::scalar(t).unwrap()
}

/// Adds `N(0, std)` noise to every bias so no pre-activation sits exactly on
/// a ReLU corner (zero-initialised biases over dead inputs give exact zeros).
pub fn jitter_biases(params: &Params, seed: u64, std: f64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).unwrap();
    for (name, var) in params.iter() {
        if name.ends_with("bias") {
            let v: Vec<f64> = flat(var.as_tensor()).iter().map(|b| b + dist.sample(&mut rng)).collect();
            set(var, &v);
        }
    }
}
