//! Comparison methods and the per-method training dispatch shared with the
//! joint method.

pub mod augment;
mod trainers;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use augment::{
    augment_random_erasing, augment_simple, hflip, pad_crop, rotate_translate, sample_erasing_rect, AugmentPolicy,
    ErasingPolicy, Rect,
};
pub use trainers::{
    bce_with_logits, dann_loss, multitask_loss, train_augmented, train_cyclegan_then_predict, train_dann, train_multitask,
    train_ours, train_pure, train_transfer, DomainClassifier, TransferRun,
};

use crate::data::{DatasetSplits, LabeledImage, ModalityDataset};
use crate::engine::{EpochLog, Method, RunContext, SeedOutcome, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{mse, translation_metrics, RandomConvExtractor, DEFAULT_IS_SPLITS};
use crate::nn::Precision;
use crate::predictor::{predict_images, Predictor, PredictorConfig};
use crate::seed::derive_seed;
use crate::translator::{
    translate_images, DiscriminatorConfig, GeneratorConfig, GeneratorKind, TranslatorConfig, TranslatorState,
};

/// Identity on the forward pass, gradient multiplied by `-scale` on the way back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReversal {
    scale: f64,
}

impl Default for GradientReversal {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl GradientReversal {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("gradient reversal scale must be > 0, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let frozen = x.detach();
        // x - frozen is exactly zero, so the value is untouched.
        let reversed = (x - &frozen)?.affine(-self.scale, 0.0)?;
        Ok((frozen + reversed)?)
    }
}

/// Ramp `2 / (1 + exp(-10 p)) - 1` of the reversal scale over training progress `p`.
pub fn dann_ramp(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// Narrow networks sized for CPU runs.
    #[default]
    Desk,
    /// The full-width translator and the 50-layer predictor.
    Full,
}

/// Network sizes. Explicit sections replace the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub precision: Precision,
    pub preset: ModelPreset,
    pub translator: Option<TranslatorConfig>,
    pub predictor: Option<PredictorConfig>,
}

impl ModelConfig {
    /// Network configs for images of the given shape. Preset predictors
    /// centre and scale their output on `train_labels`.
    pub fn resolve(
        &self,
        channels: usize,
        resolution: (usize, usize),
        train_labels: &[f64],
    ) -> Result<(TranslatorConfig, PredictorConfig)> {
        let translator = match &self.translator {
            Some(t) => t.clone(),
            None => match self.preset {
                ModelPreset::Full => TranslatorConfig::for_resolution(channels, resolution),
                ModelPreset::Desk => desk_translator(channels, resolution),
            },
        };
        let predictor = match &self.predictor {
            Some(p) => p.clone(),
            None => {
                let base = match self.preset {
                    ModelPreset::Full => PredictorConfig::resnet50(channels, resolution),
                    ModelPreset::Desk => PredictorConfig::small(channels, resolution),
                };
                let (offset, scale) = label_range(train_labels);
                base.with_label_range(offset, scale)
            }
        };
        translator.validate()?;
        predictor.validate()?;
        let shapes = [
            (translator.generator.channels, translator.generator.resolution),
            (predictor.channels, predictor.resolution),
        ];
        if shapes.iter().any(|&s| s != (channels, resolution)) {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels} channels at {resolution:?}"),
                actual: format!("{shapes:?}"),
            });
        }
        Ok((translator, predictor))
    }
}

fn desk_translator(channels: usize, resolution: (usize, usize)) -> TranslatorConfig {
    TranslatorConfig {
        generator: GeneratorConfig {
            channels,
            resolution,
            base_filters: 4,
            n_downsampling: 0,
            n_residual_blocks: 1,
            edge_kernel: 3,
            kind: GeneratorKind::Resnet,
            init_std: 0.02,
        },
        discriminator: desk_discriminator(channels, resolution),
        buffer_capacity: crate::translator::DEFAULT_CAPACITY,
    }
}

/// The 70x70 patch layout, made shallower when the images are too small.
fn desk_discriminator(channels: usize, resolution: (usize, usize)) -> DiscriminatorConfig {
    let patch = DiscriminatorConfig {
        base_filters: 4,
        ..DiscriminatorConfig::patch70(channels, resolution)
    };
    (1..=patch.n_layers)
        .rev()
        .map(|n_layers| DiscriminatorConfig { n_layers, ..patch.clone() })
        .find(|d| d.validate().is_ok())
        .unwrap_or(patch)
}

/// Mean and standard deviation of the labels, falling back to `(0, 1)`.
fn label_range(labels: &[f64]) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 1.0);
    }
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let std = (labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// Knobs of the comparison methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub augment: AugmentPolicy,
    /// Source pre-training epochs of transfer learning; `None` uses `total_epochs`.
    pub tl_pretrain_epochs: Option<usize>,
    /// Target fine-tuning epochs of transfer learning; `None` uses `total_epochs`.
    pub tl_finetune_epochs: Option<usize>,
    pub dann_domain_weight: f64,
    pub dann_hidden: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            augment: AugmentPolicy::default(),
            tl_pretrain_epochs: None,
            tl_finetune_epochs: None,
            dann_domain_weight: 0.1,
            dann_hidden: 16,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if !(self.dann_domain_weight >= 0.0 && self.dann_domain_weight.is_finite()) || self.dann_hidden == 0 {
            return Err(Error::InvalidConfig("dann weight must be >= 0 and hidden width positive".into()));
        }
        Ok(())
    }
}

/// Options for IS/FID of translated images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub enabled: bool,
    pub n_splits: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub extractor_seed: u64,
    /// Cap on translated source images scored per run.
    pub max_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_splits: DEFAULT_IS_SPLITS,
            num_classes: 10,
            feature_dim: 16,
            extractor_seed: 0,
            max_samples: 1000,
        }
    }
}

/// Everything needed to train and evaluate one method on one seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSetup {
    pub method: Method,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub metrics: MetricsConfig,
}

impl MethodSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.baselines.validate()?;
        if self.metrics.enabled && (self.metrics.n_splits == 0 || self.metrics.max_samples < 2) {
            return Err(Error::InvalidConfig("metrics need n_splits >= 1 and max_samples >= 2".into()));
        }
        Ok(())
    }
}

/// Networks produced by one training run.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub predictor: Predictor,
    pub translator: Option<TranslatorState>,
    pub step: u64,
    pub epochs: Vec<EpochLog>,
}

/// Trains `setup.method` on `source` and `target_train` with seed `seed`.
pub fn train_method(
    setup: &MethodSetup,
    source: &ModalityDataset,
    target_train: &ModalityDataset,
    seed: u64,
) -> Result<TrainedModels> {
    setup.validate()?;
    if source.is_empty() || target_train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (translator_cfg, predictor_cfg) =
        setup
            .model
            .resolve(target_train.channels(), target_train.resolution(), &target_train.labels())?;
    let precision = setup.model.precision;
    let predictor = Predictor::new(predictor_cfg, derive_seed(seed, "init.P", 0), precision, "P")?;
    let translator = || TranslatorState::new(&translator_cfg, setup.train.lambda_cyc, seed, precision);
    let (train, base) = (&setup.train, &setup.baselines);
    match setup.method {
        Method::Ours => train_ours(translator()?, predictor, source, target_train, train, seed),
        Method::Cyclegan => train_cyclegan_then_predict(translator()?, predictor, source, target_train, train, seed),
        Method::Pure => train_pure(&predictor, target_train, train, seed),
        Method::SimpleAug | Method::RandomErasing => {
            train_augmented(&predictor, target_train, setup.method, &base.augment, train, seed)
        }
        Method::Tl => Ok(train_transfer(&predictor, source, target_train, base, train, seed)?.models),
        Method::Mtl => train_multitask(&predictor, source, target_train, train, seed),
        Method::Dann => train_dann(&predictor, source, target_train, base, train, seed),
    }
}

/// Test and validation MSE of the trained predictor, plus IS/FID of the
/// translator when there is one.
pub fn evaluate(
    setup: &MethodSetup,
    models: &TrainedModels,
    source: &ModalityDataset,
    splits: &DatasetSplits,
) -> Result<SeedOutcome> {
    let batch = 64;
    let score = |ds: &ModalityDataset| -> Result<f64> {
        let refs: Vec<&LabeledImage> = ds.images().iter().collect();
        mse(&predict_images(&models.predictor, &refs, batch)?, &ds.labels())
    };
    let translation = match (&models.translator, setup.metrics.enabled) {
        (Some(t), true) => {
            let m = &setup.metrics;
            let fx = RandomConvExtractor::new(
                splits.test.channels(),
                splits.test.resolution(),
                m.num_classes,
                m.feature_dim,
                m.extractor_seed,
            )?;
            let refs: Vec<&LabeledImage> = source.images().iter().take(m.max_samples).collect();
            let translated = translate_images(&t.g, &refs, splits.test.modality(), batch)?;
            let translated: Vec<&LabeledImage> = translated.iter().collect();
            let reference: Vec<&LabeledImage> = splits.test.images().iter().take(m.max_samples).collect();
            Some(translation_metrics(&fx, &translated, &reference, m.n_splits)?)
        }
        _ => None,
    };
    Ok(SeedOutcome {
        test_mse: score(&splits.test)?,
        val_mse: Some(score(&splits.val)?),
        epochs: models.epochs.clone(),
        translation,
    })
}

/// Per-seed trainer for `run_experiment`. `on_trained` sees the networks of
/// every finished run.
pub fn method_trainer<'a, H>(setup: &'a MethodSetup, mut on_trained: H) -> impl FnMut(&RunContext<'_>) -> Result<SeedOutcome> + 'a
where
    H: FnMut(&RunContext<'_>, &TrainedModels) -> Result<()> + 'a,
{
    move |ctx| {
        let models = train_method(setup, ctx.source, &ctx.splits.train, ctx.seed)?;
        on_trained(ctx, &models)?;
        evaluate(setup, &models, ctx.source, ctx.splits)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};

    use super::*;

    #[test]
    fn reversal_is_identity_forward_and_negates_backward() {
        let x = Var::from_tensor(&Tensor::new(&[0.3f64, -1.7, 2.5], &Device::Cpu).unwrap()).unwrap();
        for scale in [1.0, 0.25] {
            let grl = GradientReversal::new(scale).unwrap();
            let y = grl.apply(x.as_tensor()).unwrap();
            assert_eq!(y.to_vec1::<f64>().unwrap(), x.as_tensor().to_vec1::<f64>().unwrap());
            let w = Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap();
            let grads = (y * &w).unwrap().sum_all().unwrap().backward().unwrap();
            let g = grads.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(g, vec![-scale, -2.0 * scale, -3.0 * scale]);
        }
        assert!(GradientReversal::new(0.0).is_err());
        assert_eq!(GradientReversal::default().scale(), 1.0);
    }

    #[test]
    fn ramp_runs_from_zero_to_one() {
        assert_eq!(dann_ramp(0.0), 0.0);
        assert!((dann_ramp(1.0) - 0.999_909).abs() < 1e-6);
        assert!(dann_ramp(0.3) < dann_ramp(0.6));
    }

    #[test]
    fn desk_preset_fits_small_images_and_centres_labels() {
        let (t, p) = ModelConfig::default().resolve(1, (64, 64), &[10.0, 30.0]).unwrap();
        assert_eq!(t.generator.resolution, (64, 64));
        assert_eq!((p.label_offset, p.label_scale), (20.0, 10.0));
        let wrong = ModelConfig {
            predictor: Some(PredictorConfig::small(3, (64, 64))),
            ..ModelConfig::default()
        };
        assert!(wrong.resolve(1, (64, 64), &[]).is_err());
    }

    #[test]
    fn setup_round_trips_through_json() {
        let setup = MethodSetup {
            method: Method::Dann,
            ..MethodSetup::default()
        };
        let json = serde_json::to_string(&setup).unwrap();
        assert_eq!(serde_json::from_str::<MethodSetup>(&json).unwrap(), setup);
        assert!(serde_json::from_str::<MethodSetup>(r#"{"bogus": 1}"#).is_err());
    }
}
