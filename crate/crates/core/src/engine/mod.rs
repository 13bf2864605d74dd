//! Joint optimisation of translator and predictor, learning-rate schedule and
//! the epoch loop.

mod experiment;

use std::fmt;
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use experiment::{
    aggregate, run_experiment, run_seed, run_single, split_hash, Aggregate, RunContext, SeedOutcome, SeedResult,
};

use crate::data::{LabeledImage, ModalityDataset};
use crate::error::{Error, Result};
use crate::nn::{scalar, Adam, AdamConfig, Precision, Track};
use crate::predictor::{mse_tensor, prediction_loss, Frozen, LabeledBatch, PredictionLoss, PredictionWeights, Predictor};
use crate::translator::{adv_loss_discriminator, translation_loss, TranslationLoss, TranslatorState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Ours,
    Tl,
    Mtl,
    Dann,
    Cyclegan,
    SimpleAug,
    RandomErasing,
    Pure,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ours,
        Method::Tl,
        Method::Mtl,
        Method::Dann,
        Method::Cyclegan,
        Method::SimpleAug,
        Method::RandomErasing,
        Method::Pure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Tl => "tl",
            Method::Mtl => "mtl",
            Method::Dann => "dann",
            Method::Cyclegan => "cyclegan",
            Method::SimpleAug => "simple-aug",
            Method::RandomErasing => "random-erasing",
            Method::Pure => "pure",
        }
    }

    /// Whether the method trains a translator.
    pub fn uses_translator(self) -> bool {
        matches!(self, Method::Ours | Method::Cyclegan)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the prediction loss in the joint objective.
    pub lambda: f64,
    pub lambda_cyc: f64,
    pub lr_translator: f64,
    pub lr_predictor: f64,
    pub decay_start_epoch: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub adam_translator: AdamConfig,
    pub adam_predictor: AdamConfig,
    pub prediction_weights: PredictionWeights,
    /// Epochs at the start of joint training during which only the
    /// translator is updated (with `lambda` treated as 0).
    pub translator_only_epochs: usize,
    pub seed: u64,
    pub n_runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            lambda_cyc: 10.0,
            lr_translator: 0.0002,
            lr_predictor: 0.001,
            decay_start_epoch: 100,
            total_epochs: 200,
            batch_size: 1,
            adam_translator: AdamConfig::gan(),
            adam_predictor: AdamConfig::standard(),
            prediction_weights: PredictionWeights::default(),
            translator_only_epochs: 0,
            seed: 0,
            n_runs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lambda_cyc > 0.0 && self.lambda_cyc.is_finite()) {
            return bad(format!("lambda_cyc must be > 0, got {}", self.lambda_cyc));
        }
        for (name, lr) in [("lr_translator", self.lr_translator), ("lr_predictor", self.lr_predictor)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        if self.decay_start_epoch == 0 || self.decay_start_epoch > self.total_epochs {
            return bad(format!(
                "need 0 < decay_start_epoch ({}) <= total_epochs ({})",
                self.decay_start_epoch, self.total_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.n_runs == 0 {
            return bad("n_runs must be positive".into());
        }
        let w = self.prediction_weights;
        if !(w.source >= 0.0 && w.target >= 0.0 && w.source.is_finite() && w.target.is_finite()) {
            return bad("prediction weights must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Constant `base_lr` until `decay_start_epoch`, then linear decay reaching 0
/// at `total_epochs`.
pub fn lr_at(epoch: usize, base_lr: f64, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} outside [0, {})",
            cfg.total_epochs
        )));
    }
    if epoch < cfg.decay_start_epoch {
        return Ok(base_lr);
    }
    let remaining = (cfg.total_epochs - epoch) as f64;
    let span = (cfg.total_epochs - cfg.decay_start_epoch) as f64;
    Ok(base_lr * (remaining / span))
}

/// Everything updated by joint training.
#[derive(Clone, Debug)]
pub struct JointState {
    pub translator: TranslatorState,
    pub predictor: Predictor,
    pub step: u64,
}

/// Adam states for the four update groups of a step.
pub struct Optimizers {
    generators: Adam,
    d_target: Adam,
    d_source: Adam,
    predictor: Adam,
}

impl Optimizers {
    pub fn new(state: &JointState, cfg: &TrainConfig) -> Result<Self> {
        let t = &state.translator;
        let mut gf = t.g.params().vars();
        gf.extend(t.f.params().vars());
        Ok(Self {
            generators: Adam::new(gf, cfg.adam_translator)?,
            d_target: Adam::new(t.d_target.params().vars(), cfg.adam_translator)?,
            d_source: Adam::new(t.d_source.params().vars(), cfg.adam_translator)?,
            predictor: Adam::new(state.predictor.params().vars(), cfg.adam_predictor)?,
        })
    }
}

/// `translation_loss + lambda * prediction_loss` with its parts.
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub total: Tensor,
    pub translation: TranslationLoss,
    pub prediction: PredictionLoss,
    pub lambda: f64,
}

impl JointLoss {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }

    pub fn sum_of_terms(&self) -> Result<f64> {
        Ok(self.translation.sum_of_terms() + self.lambda * self.prediction.total_value()?)
    }
}

/// Evaluates the joint objective with every network tracked.
pub fn joint_loss(
    translator: &TranslatorState,
    predictor: &Predictor,
    x: &LabeledBatch,
    y: &LabeledBatch,
    cfg: &TrainConfig,
) -> Result<JointLoss> {
    let translation = translation_loss(translator, &x.images, &y.images, Track::Grad)?;
    let prediction = prediction_loss(predictor, &translator.g, Some(y), Some(x), cfg.prediction_weights, Track::Grad)?;
    let total = (&translation.total + (&prediction.total * cfg.lambda)?)?;
    Ok(JointLoss {
        total,
        translation,
        prediction,
        lambda: cfg.lambda,
    })
}

/// Per-step loss values. Prediction terms are the sub-update (3) values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub adv_target: f64,
    pub adv_source: f64,
    pub cycle: f64,
    pub translation: f64,
    pub pred_source: f64,
    pub pred_target: f64,
    pub prediction: f64,
    pub joint: f64,
    pub d_target: f64,
    pub d_source: f64,
    /// Domain-classifier loss of the adversarial adaptation baseline.
    pub domain: f64,
}

impl StepLog {
    pub const COLUMNS: [&'static str; 11] = [
        "adv_target",
        "adv_source",
        "cycle",
        "translation",
        "pred_source",
        "pred_target",
        "prediction",
        "joint",
        "d_target",
        "d_source",
        "domain",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.adv_target,
            self.adv_source,
            self.cycle,
            self.translation,
            self.pred_source,
            self.pred_target,
            self.prediction,
            self.joint,
            self.d_target,
            self.d_source,
            self.domain,
        ]
    }

    fn from_values(v: [f64; 11]) -> Self {
        Self {
            adv_target: v[0],
            adv_source: v[1],
            cycle: v[2],
            translation: v[3],
            pred_source: v[4],
            pred_target: v[5],
            prediction: v[6],
            joint: v[7],
            d_target: v[8],
            d_source: v[9],
            domain: v[10],
        }
    }

    pub fn mean(logs: &[StepLog]) -> StepLog {
        if logs.is_empty() {
            return StepLog::default();
        }
        let mut acc = [0.0; 11];
        for l in logs {
            for (a, v) in acc.iter_mut().zip(l.values()) {
                *a += v;
            }
        }
        StepLog::from_values(acc.map(|a| a / logs.len() as f64))
    }
}

/// Mean step losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_translator: f64,
    pub lr_predictor: f64,
    pub losses: StepLog,
}

/// Position in training, for diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepContext {
    pub epoch: usize,
    pub lr_translator: f64,
    pub lr_predictor: f64,
    pub lambda: f64,
    pub update_predictor: bool,
}

pub(crate) fn check_finite(value: f64, ctx: &StepContext, step: u64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            epoch: ctx.epoch,
            step,
            term: term.to_string(),
        })
    }
}

fn backward(loss: &Tensor) -> Result<GradStore> {
    Ok(loss.backward()?)
}

/// One joint step: (1) G and F, (2) D_t then D_s on buffered fakes,
/// (3) P on the updated, frozen G.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut JointState,
    opt: &mut Optimizers,
    x: &LabeledBatch,
    y: &LabeledBatch,
    cfg: &TrainConfig,
    ctx: &StepContext,
    rng: &mut R,
) -> Result<StepLog> {
    let step = state.step;
    let t = &mut state.translator;

    let trans = translation_loss(t, &x.images, &y.images, Track::Frozen)?;
    let mut objective = trans.total.clone();
    if ctx.lambda > 0.0 {
        // Same value as the source part of prediction_loss, reusing G(y).
        let pred = state.predictor.forward(&trans.fake_target, Track::Frozen)?;
        let coupling = (mse_tensor(&pred, &y.labels)? * cfg.prediction_weights.source)?;
        objective = (objective + (coupling * ctx.lambda)?)?;
    }
    let translation = check_finite(trans.total_value()?, ctx, step, "translation")?;
    let joint_first = check_finite(scalar(&objective)?, ctx, step, "generator objective")?;
    opt.generators.step(&backward(&objective)?, ctx.lr_translator)?;

    let fake_target = t.buffer_target.query_batch(&trans.fake_target.detach(), rng)?;
    let d_t = adv_loss_discriminator(&t.d_target, &x.images, &fake_target)?;
    let d_target = check_finite(scalar(&d_t)?, ctx, step, "d_target")?;
    opt.d_target.step(&backward(&d_t)?, ctx.lr_translator)?;

    let fake_source = t.buffer_source.query_batch(&trans.fake_source.detach(), rng)?;
    let d_s = adv_loss_discriminator(&t.d_source, &y.images, &fake_source)?;
    let d_source = check_finite(scalar(&d_s)?, ctx, step, "d_source")?;
    opt.d_source.step(&backward(&d_s)?, ctx.lr_translator)?;

    let mut log = StepLog {
        adv_target: trans.adv_target,
        adv_source: trans.adv_source,
        cycle: trans.cycle,
        translation,
        joint: joint_first,
        d_target,
        d_source,
        ..StepLog::default()
    };
    if ctx.update_predictor {
        let pred = prediction_loss(&state.predictor, &Frozen(&t.g), Some(y), Some(x), cfg.prediction_weights, Track::Grad)?;
        let value = check_finite(pred.total_value()?, ctx, step, "prediction")?;
        opt.predictor.step(&backward(&pred.total)?, ctx.lr_predictor)?;
        log.pred_source = pred.source_mse.unwrap_or(0.0);
        log.pred_target = pred.target_mse.unwrap_or(0.0);
        log.prediction = value;
        log.joint = translation + ctx.lambda * value;
    }
    state.step += 1;
    Ok(log)
}

/// `steps * batch` indices drawn from back-to-back shuffles of `0..n`.
pub fn cycled_batches<R: Rng + ?Sized>(n: usize, steps: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut pool: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch {
            if pool.is_empty() {
                pool = (0..n).collect();
                pool.shuffle(rng);
                pool.reverse();
            }
            b.push(pool.pop().expect("refilled above"));
        }
        out.push(b);
    }
    out
}

/// Steps per epoch: the larger set is covered once, the smaller one cycled.
pub fn steps_per_epoch(n_source: usize, n_target: usize, batch: usize) -> usize {
    n_source.max(n_target).div_ceil(batch)
}

pub(crate) fn gather(ds: &ModalityDataset, idx: &[usize], precision: Precision) -> Result<LabeledBatch> {
    let refs: Vec<&LabeledImage> = idx.iter().map(|&i| &ds.images()[i]).collect();
    LabeledBatch::from_images(&refs, precision.dtype())
}

/// Trains `state` jointly for `cfg.total_epochs` epochs. `on_epoch` sees the
/// state after every epoch.
pub fn train_joint<R: Rng + ?Sized>(
    state: &mut JointState,
    source: &ModalityDataset,
    target: &ModalityDataset,
    cfg: &TrainConfig,
    update_predictor: bool,
    rng: &mut R,
    mut on_epoch: impl FnMut(&JointState, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let precision = state.translator.precision();
    let mut opt = Optimizers::new(state, cfg)?;
    let steps = steps_per_epoch(source.len(), target.len(), cfg.batch_size);
    let mut logs = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let staged = epoch < cfg.translator_only_epochs;
        let ctx = StepContext {
            epoch,
            lr_translator: lr_at(epoch, cfg.lr_translator, cfg)?,
            lr_predictor: lr_at(epoch, cfg.lr_predictor, cfg)?,
            lambda: if staged || !update_predictor { 0.0 } else { cfg.lambda },
            update_predictor: update_predictor && !staged,
        };
        let ys = cycled_batches(source.len(), steps, cfg.batch_size, rng);
        let xs = cycled_batches(target.len(), steps, cfg.batch_size, rng);
        let mut step_logs = Vec::with_capacity(steps);
        for (yi, xi) in ys.iter().zip(&xs) {
            let y = gather(source, yi, precision)?;
            let x = gather(target, xi, precision)?;
            step_logs.push(train_step(state, &mut opt, &x, &y, cfg, &ctx, rng)?);
        }
        let log = EpochLog {
            epoch,
            lr_translator: ctx.lr_translator,
            lr_predictor: ctx.lr_predictor,
            losses: StepLog::mean(&step_logs),
        };
        log::debug!("epoch {epoch}: {:?}", log.losses);
        on_epoch(state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}
