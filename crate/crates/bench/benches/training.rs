use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use duiit_core::baselines::ModelConfig;
use duiit_core::data::{generate_synthetic_task, LabeledImage, SyntheticTaskSpec};
use duiit_core::engine::{train_step, JointState, Optimizers, StepContext, TrainConfig};
use duiit_core::nn::{conv2d_unfolded, Precision, Track};
use duiit_core::predictor::{LabeledBatch, Predictor};
use duiit_core::translator::TranslatorState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RES: (usize, usize) = (64, 64);
const BATCH: usize = 8;

fn batch(images: &[LabeledImage]) -> LabeledBatch {
    let refs: Vec<&LabeledImage> = images.iter().take(BATCH).collect();
    LabeledBatch::from_images(&refs, DType::F32).unwrap()
}

fn convs(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let dev = Device::Cpu;
    for (name, ci, co, k, stride) in [("4to8_k3_s2", 4, 8, 3, 2), ("8to8_k3_s1", 8, 8, 3, 1), ("4to1_k7_s1", 4, 1, 7, 1)] {
        let x = Tensor::randn(0f32, 1.0, (BATCH, ci, RES.0, RES.1), &dev).unwrap();
        let w = Tensor::randn(0f32, 0.1, (co, ci, k, k), &dev).unwrap();
        let p = k / 2;
        group.bench_function(format!("unfolded/{name}"), |b| {
            b.iter(|| conv2d_unfolded(&x, &w, (p, p, p, p), stride).unwrap())
        });
        group.bench_function(format!("native/{name}"), |b| b.iter(|| x.conv2d(&w, p, stride, 1, 1).unwrap()));
    }
    group.finish();
}

fn desk_step(c: &mut Criterion) {
    let task = generate_synthetic_task(&SyntheticTaskSpec::new(BATCH, BATCH, RES, 0)).unwrap();
    let labels = task.target.labels();
    let (tcfg, pcfg) = ModelConfig::default().resolve(1, RES, &labels).unwrap();
    let cfg = TrainConfig { batch_size: BATCH, ..TrainConfig::default() };
    let (x, y) = (batch(task.target.images()), batch(task.source.images()));
    let ctx = StepContext {
        epoch: 0,
        lr_translator: cfg.lr_translator,
        lr_predictor: cfg.lr_predictor,
        lambda: cfg.lambda,
        update_predictor: true,
    };
    let mut state = JointState {
        translator: TranslatorState::new(&tcfg, cfg.lambda_cyc, 0, Precision::F32).unwrap(),
        predictor: Predictor::new(pcfg, 1, Precision::F32, "P").unwrap(),
        step: 0,
    };
    let mut opt = Optimizers::new(&state, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut group = c.benchmark_group("desk");
    group.sample_size(10);
    let g = state.translator.g.clone();
    group.bench_function("generator_forward", |b| b.iter(|| g.forward(&y.images, Track::Frozen).unwrap()));
    group.bench_function("generator_forward_backward", |b| {
        b.iter_batched(
            || (),
            |_| g.forward(&y.images, Track::Grad).unwrap().sqr().unwrap().mean_all().unwrap().backward().unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("joint_train_step", |b| {
        b.iter(|| train_step(&mut state, &mut opt, &x, &y, &cfg, &ctx, &mut rng).unwrap())
    });
    group.finish();
}


criterion_group!(benches, convs, desk_step);
criterion_main!(benches);
