use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use super::augment::{augment_random_erasing, augment_simple, AugmentPolicy};
use super::{dann_ramp, BaselineConfig, GradientReversal, TrainedModels};
use crate::data::{LabeledImage, ModalityDataset};
use crate::engine::{
    check_finite, cycled_batches, gather, lr_at, steps_per_epoch, train_joint, EpochLog, JointState, Method, StepContext,
    StepLog, TrainConfig,
};
use crate::error::{Error, Result};
use crate::nn::{scalar, Adam, Init, Linear, ParamBuilder, ParamSnapshot, Params, Precision, Track};
use crate::predictor::{mse_tensor, LabeledBatch, Predictor};
use crate::seed::{derive_seed, rng_for};
use crate::translator::{translate_images, TranslatorState};

/// `cfg` with its decay schedule stretched over `epochs`.
fn schedule_for(cfg: &TrainConfig, epochs: usize) -> TrainConfig {
    if epochs == cfg.total_epochs {
        return cfg.clone();
    }
    let ratio = cfg.decay_start_epoch as f64 / cfg.total_epochs as f64;
    TrainConfig {
        total_epochs: epochs,
        decay_start_epoch: ((ratio * epochs as f64).round() as usize).clamp(1, epochs.max(1)),
        ..cfg.clone()
    }
}

fn shuffled_batches<R: Rng + ?Sized>(images: &[LabeledImage], batch: usize, rng: &mut R) -> Vec<Vec<LabeledImage>> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch.max(1))
        .map(|c| c.iter().map(|&i| images[i].clone()).collect())
        .collect()
}

/// Plain MSE training of `p`, one Adam step per batch returned by `epoch_batches`.
fn fit_predictor<R: Rng>(
    p: &Predictor,
    epochs: usize,
    epoch_offset: usize,
    cfg: &TrainConfig,
    rng: &mut R,
    step: &mut u64,
    mut epoch_batches: impl FnMut(&mut R) -> Result<Vec<Vec<LabeledImage>>>,
) -> Result<Vec<EpochLog>> {
    let schedule = schedule_for(cfg, epochs);
    let dtype = p.precision().dtype();
    let mut opt = Adam::new(p.params().vars(), cfg.adam_predictor)?;
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let ctx = StepContext {
            epoch: epoch_offset + epoch,
            lr_predictor: lr_at(epoch, cfg.lr_predictor, &schedule)?,
            update_predictor: true,
            ..StepContext::default()
        };
        let mut step_logs = Vec::new();
        for batch in epoch_batches(rng)? {
            let refs: Vec<&LabeledImage> = batch.iter().collect();
            let b = LabeledBatch::from_images(&refs, dtype)?;
            let loss = mse_tensor(&p.forward(&b.images, Track::Grad)?, &b.labels)?;
            let value = check_finite(scalar(&loss)?, &ctx, *step, "prediction")?;
            opt.step(&loss.backward()?, ctx.lr_predictor)?;
            *step += 1;
            step_logs.push(StepLog {
                pred_target: value,
                prediction: value,
                joint: value,
                ..StepLog::default()
            });
        }
        logs.push(EpochLog {
            epoch: ctx.epoch,
            lr_translator: 0.0,
            lr_predictor: ctx.lr_predictor,
            losses: StepLog::mean(&step_logs),
        });
    }
    Ok(logs)
}

fn nonempty(datasets: &[&ModalityDataset]) -> Result<()> {
    if datasets.iter().any(|d| d.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Predictor trained on the target training set alone.
pub fn train_pure(p: &Predictor, target: &ModalityDataset, cfg: &TrainConfig, seed: u64) -> Result<TrainedModels> {
    nonempty(&[target])?;
    let mut rng = rng_for(seed, "train", 0);
    let mut step = 0;
    let epochs = fit_predictor(p, cfg.total_epochs, 0, cfg, &mut rng, &mut step, |rng| {
        Ok(shuffled_batches(target.images(), cfg.batch_size, rng))
    })?;
    Ok(TrainedModels {
        predictor: p.clone(),
        translator: None,
        step,
        epochs,
    })
}

/// Predictor trained on target images freshly augmented every epoch,
/// with the simple policy or with random erasing.
pub fn train_augmented(
    p: &Predictor,
    target: &ModalityDataset,
    method: Method,
    policy: &AugmentPolicy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModels> {
    nonempty(&[target])?;
    let erase = match method {
        Method::SimpleAug => false,
        Method::RandomErasing => true,
        other => return Err(Error::InvalidConfig(format!("`{other}` is not an augmentation method"))),
    };
    policy.validate()?;
    let mut rng = rng_for(seed, "train", 0);
    let mut step = 0;
    let epochs = fit_predictor(p, cfg.total_epochs, 0, cfg, &mut rng, &mut step, |rng| {
        let augmented = target
            .images()
            .iter()
            .map(|img| {
                if erase {
                    augment_random_erasing(img, &policy.erasing, rng)
                } else {
                    augment_simple(img, policy, rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(shuffled_batches(&augmented, cfg.batch_size, rng))
    })?;
    Ok(TrainedModels {
        predictor: p.clone(),
        translator: None,
        step,
        epochs,
    })
}

/// Transfer learning with the weights handed from phase 1 to phase 2.
#[derive(Clone, Debug)]
pub struct TransferRun {
    pub models: TrainedModels,
    pub phase1_final: ParamSnapshot,
    pub phase2_initial: ParamSnapshot,
}

/// Pre-trains `p` on the source set, then fine-tunes a copy on the target set.
pub fn train_transfer(
    p: &Predictor,
    source: &ModalityDataset,
    target: &ModalityDataset,
    base: &BaselineConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TransferRun> {
    nonempty(&[source, target])?;
    let pretrain = base.tl_pretrain_epochs.unwrap_or(cfg.total_epochs);
    let finetune = base.tl_finetune_epochs.unwrap_or(cfg.total_epochs);
    let mut rng = rng_for(seed, "train", 0);
    let mut step = 0;
    let mut epochs = fit_predictor(p, pretrain, 0, cfg, &mut rng, &mut step, |rng| {
        Ok(shuffled_batches(source.images(), cfg.batch_size, rng))
    })?;
    let phase1_final = p.params().snapshot()?;
    let tuned = p.deep_clone()?;
    let phase2_initial = tuned.params().snapshot()?;
    epochs.extend(fit_predictor(&tuned, finetune, pretrain, cfg, &mut rng, &mut step, |rng| {
        Ok(shuffled_batches(target.images(), cfg.batch_size, rng))
    })?);
    Ok(TransferRun {
        models: TrainedModels {
            predictor: tuned,
            translator: None,
            step,
            epochs,
        },
        phase1_final,
        phase2_initial,
    })
}

fn scalar_head(d_in: usize, name: &str, seed: u64, precision: Precision) -> Result<(Linear, Params)> {
    let mut pb = ParamBuilder::random(seed, precision);
    let head = Linear::new(&mut pb, name, d_in, 1, Init::Normal((1.0 / d_in as f64).sqrt()))?;
    Ok((head, pb.finish()))
}

/// `(mean of the two per-modality MSEs, source MSE, target MSE)` with a
/// shared backbone and one head per modality.
pub fn multitask_loss(
    p: &Predictor,
    source_head: &Linear,
    source: &LabeledBatch,
    target: &LabeledBatch,
) -> Result<(Tensor, f64, f64)> {
    let features = p.features(&source.images, Track::Grad)?;
    let ms = mse_tensor(&p.regress(source_head, &features, Track::Grad)?, &source.labels)?;
    let mt = mse_tensor(&p.forward(&target.images, Track::Grad)?, &target.labels)?;
    let (vs, vt) = (scalar(&ms)?, scalar(&mt)?);
    Ok((((ms + mt)? * 0.5)?, vs, vt))
}

/// Multi-task learning: one backbone, a source head and a target head. The
/// returned predictor carries only the target head.
pub fn train_multitask(
    p: &Predictor,
    source: &ModalityDataset,
    target: &ModalityDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModels> {
    nonempty(&[source, target])?;
    let precision = p.precision();
    let (source_head, head_params) =
        scalar_head(p.config().feature_dim(), "source_head", derive_seed(seed, "init.P.source_head", 0), precision)?;
    let mut vars = p.params().vars();
    vars.extend(head_params.vars());
    let mut opt = Adam::new(vars, cfg.adam_predictor)?;
    let mut rng = rng_for(seed, "train", 0);
    let steps = steps_per_epoch(source.len(), target.len(), cfg.batch_size);
    let mut step = 0u64;
    let mut epochs = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let ctx = StepContext {
            epoch,
            lr_predictor: lr_at(epoch, cfg.lr_predictor, cfg)?,
            update_predictor: true,
            ..StepContext::default()
        };
        let ys = cycled_batches(source.len(), steps, cfg.batch_size, &mut rng);
        let xs = cycled_batches(target.len(), steps, cfg.batch_size, &mut rng);
        let mut logs = Vec::with_capacity(steps);
        for (yi, xi) in ys.iter().zip(&xs) {
            let (y, x) = (gather(source, yi, precision)?, gather(target, xi, precision)?);
            let (loss, ms, mt) = multitask_loss(p, &source_head, &y, &x)?;
            let value = check_finite(scalar(&loss)?, &ctx, step, "prediction")?;
            opt.step(&loss.backward()?, ctx.lr_predictor)?;
            step += 1;
            logs.push(StepLog {
                pred_source: ms,
                pred_target: mt,
                prediction: value,
                joint: value,
                ..StepLog::default()
            });
        }
        epochs.push(EpochLog {
            epoch,
            lr_translator: 0.0,
            lr_predictor: ctx.lr_predictor,
            losses: StepLog::mean(&logs),
        });
    }
    Ok(TrainedModels {
        predictor: p.clone(),
        translator: None,
        step,
        epochs,
    })
}

/// Two-layer domain classifier on backbone features, one logit per image.
#[derive(Clone, Debug)]
pub struct DomainClassifier {
    params: Params,
    hidden: Linear,
    out: Linear,
}

impl DomainClassifier {
    pub fn new(d_in: usize, hidden: usize, seed: u64, precision: Precision) -> Result<Self> {
        let mut pb = ParamBuilder::random(seed, precision);
        pb.push_prefix("domain");
        let h = Linear::new(&mut pb, "hidden", d_in, hidden, Init::Normal((2.0 / d_in as f64).sqrt()))?;
        let out = Linear::new(&mut pb, "out", hidden, 1, Init::Normal((1.0 / hidden as f64).sqrt()))?;
        Ok(Self {
            params: pb.finish(),
            hidden: h,
            out,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn forward(&self, features: &Tensor, track: Track) -> Result<Tensor> {
        let h = self.hidden.forward(features, track)?.relu()?;
        Ok(self.out.forward(&h, track)?.squeeze(1)?)
    }
}

/// Mean binary cross-entropy of `logits` against 0/1 `targets`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus_neg_abs = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_item = ((logits.relu()? - (logits * targets)?)? + softplus_neg_abs)?;
    Ok(per_item.mean_all()?)
}

/// `(source MSE + target MSE + weight * domain BCE, source MSE, target MSE,
/// domain BCE)`. Source images are domain 0, target images domain 1.
pub fn dann_loss(
    p: &Predictor,
    classifier: &DomainClassifier,
    grl: &GradientReversal,
    source: &LabeledBatch,
    target: &LabeledBatch,
    weight: f64,
) -> Result<(Tensor, f64, f64, f64)> {
    let fs = p.features(&source.images, Track::Grad)?;
    let ft = p.features(&target.images, Track::Grad)?;
    let ms = mse_tensor(&p.regress(p.head(), &fs, Track::Grad)?, &source.labels)?;
    let mt = mse_tensor(&p.regress(p.head(), &ft, Track::Grad)?, &target.labels)?;
    let logits = classifier.forward(&grl.apply(&Tensor::cat(&[&fs, &ft], 0)?)?, Track::Grad)?;
    let domains: Vec<f64> = std::iter::repeat(0.0)
        .take(source.len())
        .chain(std::iter::repeat(1.0).take(target.len()))
        .collect();
    let domains = Tensor::new(domains, logits.device())?.to_dtype(logits.dtype())?;
    let domain = bce_with_logits(&logits, &domains)?;
    let (vs, vt, vd) = (scalar(&ms)?, scalar(&mt)?, scalar(&domain)?);
    let total = ((ms + mt)? + (domain * weight)?)?;
    Ok((total, vs, vt, vd))
}

/// Domain-adversarial training: both labeled modalities through one
/// regressor, with a domain classifier behind gradient reversal.
pub fn train_dann(
    p: &Predictor,
    source: &ModalityDataset,
    target: &ModalityDataset,
    base: &BaselineConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModels> {
    nonempty(&[source, target])?;
    let precision = p.precision();
    let classifier =
        DomainClassifier::new(p.config().feature_dim(), base.dann_hidden, derive_seed(seed, "init.domain", 0), precision)?;
    let mut vars = p.params().vars();
    vars.extend(classifier.params().vars());
    let mut opt = Adam::new(vars, cfg.adam_predictor)?;
    let mut rng = rng_for(seed, "train", 0);
    let steps = steps_per_epoch(source.len(), target.len(), cfg.batch_size);
    let total_steps = (steps * cfg.total_epochs) as f64;
    let mut step = 0u64;
    let mut epochs = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let ctx = StepContext {
            epoch,
            lr_predictor: lr_at(epoch, cfg.lr_predictor, cfg)?,
            update_predictor: true,
            ..StepContext::default()
        };
        let ys = cycled_batches(source.len(), steps, cfg.batch_size, &mut rng);
        let xs = cycled_batches(target.len(), steps, cfg.batch_size, &mut rng);
        let mut logs = Vec::with_capacity(steps);
        for (yi, xi) in ys.iter().zip(&xs) {
            let (y, x) = (gather(source, yi, precision)?, gather(target, xi, precision)?);
            let grl = GradientReversal::new(dann_ramp((step + 1) as f64 / total_steps))?;
            let (loss, ms, mt, domain) = dann_loss(p, &classifier, &grl, &y, &x, base.dann_domain_weight)?;
            let value = check_finite(scalar(&loss)?, &ctx, step, "dann")?;
            opt.step(&loss.backward()?, ctx.lr_predictor)?;
            step += 1;
            logs.push(StepLog {
                pred_source: ms,
                pred_target: mt,
                prediction: ms + mt,
                joint: value,
                domain,
                ..StepLog::default()
            });
        }
        epochs.push(EpochLog {
            epoch,
            lr_translator: 0.0,
            lr_predictor: ctx.lr_predictor,
            losses: StepLog::mean(&logs),
        });
    }
    Ok(TrainedModels {
        predictor: p.clone(),
        translator: None,
        step,
        epochs,
    })
}

/// Joint training of translator and predictor.
pub fn train_ours(
    translator: TranslatorState,
    predictor: Predictor,
    source: &ModalityDataset,
    target: &ModalityDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModels> {
    nonempty(&[source, target])?;
    let mut state = JointState {
        translator,
        predictor,
        step: 0,
    };
    let mut rng = rng_for(seed, "train", 0);
    let epochs = train_joint(&mut state, source, target, cfg, true, &mut rng, |_, _| Ok(()))?;
    Ok(TrainedModels {
        predictor: state.predictor,
        translator: Some(state.translator),
        step: state.step,
        epochs,
    })
}

/// Unsupervised translator training, then a predictor fitted on the
/// translated source set combined with the target set.
pub fn train_cyclegan_then_predict(
    translator: TranslatorState,
    predictor: Predictor,
    source: &ModalityDataset,
    target: &ModalityDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModels> {
    nonempty(&[source, target])?;
    let mut state = JointState {
        translator,
        predictor,
        step: 0,
    };
    let mut rng = rng_for(seed, "train", 0);
    let mut epochs = train_joint(&mut state, source, target, cfg, false, &mut rng, |_, _| Ok(()))?;

    let refs: Vec<&LabeledImage> = source.images().iter().collect();
    let mut combined = translate_images(&state.translator.g, &refs, target.modality(), 64)?;
    combined.extend(target.images().iter().cloned());
    let mut step = state.step;
    epochs.extend(fit_predictor(
        &state.predictor,
        cfg.total_epochs,
        cfg.total_epochs,
        cfg,
        &mut rng,
        &mut step,
        |rng| Ok(shuffled_batches(&combined, cfg.batch_size, rng)),
    )?);
    Ok(TrainedModels {
        predictor: state.predictor,
        translator: Some(state.translator),
        step,
        epochs,
    })
}
