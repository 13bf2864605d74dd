//! Unpaired translation between a source modality `Y` and a target modality `X`.
//!
//! `G: Y -> X` and `F: X -> Y` are trained against patch discriminators `D_t`
//! (judging target-modality images) and `D_s` (source-modality images) with
//! least-squares adversarial losses, plus an L1 cycle-consistency penalty.

mod buffer;
mod discriminator;
mod generator;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use buffer::{Drawn, ImageBuffer, DEFAULT_CAPACITY};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, GeneratorKind};
pub(crate) use generator::check_batch;

use crate::data::{images_to_tensor, tensor_to_pixels, LabeledImage, Modality};
use crate::error::{Error, Result};
use crate::nn::{scalar, Precision, Track};
use crate::seed::derive_seed;

pub const DEFAULT_LAMBDA_CYC: f64 = 10.0;

/// Anything that maps an image batch to an image batch of the same shape.
pub trait ImageMap {
    fn map(&self, x: &Tensor, track: Track) -> Result<Tensor>;
}

impl ImageMap for Generator {
    fn map(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        self.forward(x, track)
    }
}

/// Adapts a plain function into an [`ImageMap`].
pub struct MapFn<F>(pub F);

impl<F: Fn(&Tensor) -> Result<Tensor>> ImageMap for MapFn<F> {
    fn map(&self, x: &Tensor, _track: Track) -> Result<Tensor> {
        (self.0)(x)
    }
}

fn non_empty(x: &Tensor) -> Result<()> {
    if x.dims().first().copied().unwrap_or(0) == 0 || x.elem_count() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// `mean((s - 1)^2)` over images and patches.
pub fn lsgan_generator_loss(scores: &Tensor) -> Result<Tensor> {
    non_empty(scores)?;
    Ok((scores - 1.0)?.sqr()?.mean_all()?)
}

/// `½ [mean((s_real - 1)^2) + mean(s_fake^2)]`.
pub fn lsgan_discriminator_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    non_empty(real_scores)?;
    non_empty(fake_scores)?;
    let real = (real_scores - 1.0)?.sqr()?.mean_all()?;
    let fake = fake_scores.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// Least-squares generator loss of `fake` under `d`. `d_track` selects
/// whether the discriminator parameters record gradients.
pub fn adv_loss_generator(d: &Discriminator, fake: &Tensor, d_track: Track) -> Result<Tensor> {
    non_empty(fake)?;
    lsgan_generator_loss(&d.forward(fake, d_track)?)
}

pub fn adv_loss_discriminator(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    non_empty(real)?;
    non_empty(fake)?;
    let real_scores = d.forward(real, Track::Grad)?;
    let fake_scores = d.forward(&fake.detach(), Track::Grad)?;
    lsgan_discriminator_loss(&real_scores, &fake_scores)
}

fn mean_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `mean|F(G(y)) - y| + mean|G(F(x)) - x|`.
pub fn cycle_loss(g: &dyn ImageMap, f: &dyn ImageMap, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    non_empty(x)?;
    non_empty(y)?;
    let forward = mean_l1(&f.map(&g.map(y, Track::Grad)?, Track::Grad)?, y)?;
    let backward = mean_l1(&g.map(&f.map(x, Track::Grad)?, Track::Grad)?, x)?;
    Ok((forward + backward)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(default = "default_buffer_capacity")]
    pub buffer_capacity: usize,
}

fn default_buffer_capacity() -> usize {
    DEFAULT_CAPACITY
}

impl TranslatorConfig {
    pub fn for_resolution(channels: usize, resolution: (usize, usize)) -> Self {
        Self {
            generator: GeneratorConfig::for_resolution(channels, resolution),
            discriminator: DiscriminatorConfig::patch70(channels, resolution),
            buffer_capacity: DEFAULT_CAPACITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (g, d) = (&self.generator, &self.discriminator);
        if g.channels != d.channels || g.resolution != d.resolution {
            return Err(Error::InvalidConfig("generator and discriminator disagree on image shape".into()));
        }
        g.validate()?;
        d.validate()
    }
}

/// The four translator networks and their replay buffers.
#[derive(Clone, Debug)]
pub struct TranslatorState {
    pub g: Generator,
    pub f: Generator,
    pub d_source: Discriminator,
    pub d_target: Discriminator,
    pub buffer_source: ImageBuffer,
    pub buffer_target: ImageBuffer,
    pub lambda_cyc: f64,
}

impl TranslatorState {
    pub fn new(config: &TranslatorConfig, lambda_cyc: f64, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        if !(lambda_cyc > 0.0 && lambda_cyc.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_cyc must be positive, got {lambda_cyc}")));
        }
        let gen = |name: &str| Generator::new(config.generator.clone(), derive_seed(seed, &format!("init.{name}"), 0), precision, name);
        let disc = |name: &str| {
            Discriminator::new(config.discriminator.clone(), derive_seed(seed, &format!("init.{name}"), 0), precision, name)
        };
        Ok(Self {
            g: gen("G")?,
            f: gen("F")?,
            d_source: disc("D_s")?,
            d_target: disc("D_t")?,
            buffer_source: ImageBuffer::new(config.buffer_capacity),
            buffer_target: ImageBuffer::new(config.buffer_capacity),
            lambda_cyc,
        })
    }

    pub fn precision(&self) -> Precision {
        self.g.precision()
    }

    pub fn num_parameters(&self) -> usize {
        [self.g.params(), self.f.params(), self.d_source.params(), self.d_target.params()]
            .iter()
            .map(|p| p.num_elements())
            .sum()
    }
}

/// Generator-side value of the translation objective, with its parts.
#[derive(Clone, Debug)]
pub struct TranslationLoss {
    pub total: Tensor,
    /// `D_t` judging `G(y)`.
    pub adv_target: f64,
    /// `D_s` judging `F(x)`.
    pub adv_source: f64,
    pub cycle: f64,
    pub lambda_cyc: f64,
    /// `G(y)`, still attached to the graph.
    pub fake_target: Tensor,
    /// `F(x)`, still attached to the graph.
    pub fake_source: Tensor,
}

impl TranslationLoss {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }

    /// Sum of the reported parts, for bookkeeping checks.
    pub fn sum_of_terms(&self) -> f64 {
        self.adv_target + self.adv_source + self.lambda_cyc * self.cycle
    }
}

/// Adversarial terms for both directions plus `lambda_cyc` times the cycle
/// loss. `d_track` controls whether the discriminators record gradients.
pub fn translation_loss(state: &TranslatorState, x: &Tensor, y: &Tensor, d_track: Track) -> Result<TranslationLoss> {
    non_empty(x)?;
    non_empty(y)?;
    let fake_target = state.g.forward(y, Track::Grad)?;
    let fake_source = state.f.forward(x, Track::Grad)?;
    let adv_target = adv_loss_generator(&state.d_target, &fake_target, d_track)?;
    let adv_source = adv_loss_generator(&state.d_source, &fake_source, d_track)?;
    let rec_source = state.f.forward(&fake_target, Track::Grad)?;
    let rec_target = state.g.forward(&fake_source, Track::Grad)?;
    let cycle = (mean_l1(&rec_source, y)? + mean_l1(&rec_target, x)?)?;
    let total = ((&adv_target + &adv_source)? + (&cycle * state.lambda_cyc)?)?;
    Ok(TranslationLoss {
        adv_target: scalar(&adv_target)?,
        adv_source: scalar(&adv_source)?,
        cycle: scalar(&cycle)?,
        lambda_cyc: state.lambda_cyc,
        total,
        fake_target,
        fake_source,
    })
}

/// Runs `g` without recording gradients.
pub fn translate(g: &Generator, batch: &Tensor) -> Result<Tensor> {
    g.forward(batch, Track::Frozen)
}

/// Translates labeled images in batches, carrying ids and labels and
/// retagging the modality.
pub fn translate_images(
    g: &Generator,
    images: &[&LabeledImage],
    modality: &Modality,
    batch_size: usize,
) -> Result<Vec<LabeledImage>> {
    let dtype = g.precision().dtype();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let x = images_to_tensor(chunk, dtype)?;
        let y = translate(g, &x)?;
        for (img, pixels) in chunk.iter().zip(tensor_to_pixels(&y)?) {
            out.push(LabeledImage {
                pixels,
                modality: modality.clone(),
                ..(*img).clone()
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    fn tiny_config() -> TranslatorConfig {
        TranslatorConfig {
            generator: GeneratorConfig {
                channels: 1,
                resolution: (8, 8),
                base_filters: 2,
                n_downsampling: 1,
                n_residual_blocks: 1,
                edge_kernel: 3,
                kind: GeneratorKind::Resnet,
                init_std: 0.02,
            },
            discriminator: DiscriminatorConfig {
                channels: 1,
                resolution: (8, 8),
                base_filters: 2,
                n_layers: 1,
                init_std: 0.02,
            },
            buffer_capacity: 4,
        }
    }

    fn full(v: f64, n: usize) -> Tensor {
        Tensor::full(v, (n, 1, 3, 3), &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn generator_loss_constants() {
        assert_eq!(value(&lsgan_generator_loss(&full(1.0, 2)).unwrap()), 0.0);
        assert_eq!(value(&lsgan_generator_loss(&full(0.0, 2)).unwrap()), 1.0);
        assert_eq!(value(&lsgan_generator_loss(&full(0.5, 2)).unwrap()), 0.25);
    }

    #[test]
    fn discriminator_loss_constants() {
        let l = |r, f| value(&lsgan_discriminator_loss(&full(r, 2), &full(f, 3)).unwrap());
        assert_eq!(l(1.0, 0.0), 0.0);
        assert_eq!(l(0.0, 1.0), 1.0);
        assert_eq!(l(0.5, 0.5), 0.25);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let empty = Tensor::zeros((0, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(lsgan_generator_loss(&empty), Err(Error::EmptyBatch)));
        assert!(matches!(lsgan_discriminator_loss(&full(1.0, 1), &empty), Err(Error::EmptyBatch)));
    }

    #[test]
    fn network_adv_losses_with_constant_scores() {
        let state = TranslatorState::new(&tiny_config(), 10.0, 1, Precision::F64).unwrap();
        let d = &state.d_target;
        let layer = d.score_layer();
        layer.weight().set(&layer.weight().as_tensor().zeros_like().unwrap()).unwrap();
        let x = Tensor::rand(-1f64, 1f64, (3, 1, 8, 8), &Device::Cpu).unwrap();
        let set_bias = |v: f64| {
            let b = layer.bias().unwrap();
            b.set(&(b.as_tensor().ones_like().unwrap() * v).unwrap()).unwrap();
        };
        set_bias(0.5);
        assert!((value(&adv_loss_generator(d, &x, Track::Frozen).unwrap()) - 0.25).abs() < 1e-15);
        assert!((value(&adv_loss_discriminator(d, &x, &x).unwrap()) - 0.25).abs() < 1e-15);
        set_bias(1.0);
        assert_eq!(value(&adv_loss_generator(d, &x, Track::Frozen).unwrap()), 0.0);
    }

    #[test]
    fn adv_losses_are_permutation_invariant() {
        let state = TranslatorState::new(&tiny_config(), 10.0, 2, Precision::F64).unwrap();
        let x = Tensor::rand(-1f64, 1f64, (4, 1, 8, 8), &Device::Cpu).unwrap();
        let idx = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let xp = x.index_select(&idx, 0).unwrap();
        let a = value(&adv_loss_generator(&state.d_source, &x, Track::Frozen).unwrap());
        let b = value(&adv_loss_generator(&state.d_source, &xp, Track::Frozen).unwrap());
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn cycle_loss_identity_and_offset() {
        let id = MapFn(|x: &Tensor| Ok(x.clone()));
        let shift = MapFn(|x: &Tensor| Ok((x + 0.1)?));
        let x = Tensor::rand(-0.5f64, 0.5, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let y = Tensor::rand(-0.5f64, 0.5, (3, 1, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(value(&cycle_loss(&id, &id, &x, &y).unwrap()), 0.0);
        // F(G(y)) = y + 0.1 and G(F(x)) = x + 0.1, so each term is 0.1.
        assert!((value(&cycle_loss(&shift, &id, &x, &y).unwrap()) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_matches_pixel_loop() {
        let state = TranslatorState::new(&tiny_config(), 10.0, 3, Precision::F64).unwrap();
        let x = Tensor::rand(-1f64, 1f64, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let y = Tensor::rand(-1f64, 1f64, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let got = value(&cycle_loss(&state.g, &state.f, &x, &y).unwrap());
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let l1 = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        let fgy = flat(&translate(&state.f, &translate(&state.g, &y).unwrap()).unwrap());
        let gfx = flat(&translate(&state.g, &translate(&state.f, &x).unwrap()).unwrap());
        let want = l1(fgy, flat(&y)) + l1(gfx, flat(&x));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn translation_loss_bookkeeping() {
        let state = TranslatorState::new(&tiny_config(), 10.0, 4, Precision::F64).unwrap();
        let x = Tensor::rand(-1f64, 1f64, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let y = Tensor::rand(-1f64, 1f64, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let loss = translation_loss(&state, &x, &y, Track::Frozen).unwrap();
        assert!((loss.total_value().unwrap() - loss.sum_of_terms()).abs() < 1e-9);
        assert!(loss.total_value().unwrap() >= 0.0);
    }

    #[test]
    fn translation_loss_with_identity_generators_is_adversarial_only() {
        let mut state = TranslatorState::new(&tiny_config(), 10.0, 5, Precision::F64).unwrap();
        let id = GeneratorConfig::debug_identity(1, (8, 8));
        state.g = Generator::new(id.clone(), 0, Precision::F64, "G").unwrap();
        state.f = Generator::new(id, 0, Precision::F64, "F").unwrap();
        for d in [&state.d_source, &state.d_target] {
            let l = d.score_layer();
            l.weight().set(&l.weight().as_tensor().zeros_like().unwrap()).unwrap();
            let b = l.bias().unwrap();
            b.set(&b.as_tensor().zeros_like().unwrap()).unwrap();
        }
        // tanh is not an exact identity, so use inputs where the cycle is
        // exactly representable: all zeros.
        let z = Tensor::zeros((2, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let loss = translation_loss(&state, &z, &z, Track::Frozen).unwrap();
        assert_eq!(loss.cycle, 0.0);
        assert_eq!(loss.total_value().unwrap(), 2.0);
    }

    #[test]
    fn translate_images_carries_labels() {
        let state = TranslatorState::new(&tiny_config(), 10.0, 6, Precision::F32).unwrap();
        let ds = crate::data::test_util::toy_dataset(5);
        let refs: Vec<_> = ds.images().iter().collect();
        let out = translate_images(&state.g, &refs, &Modality::new("target"), 2).unwrap();
        assert_eq!(out.len(), 5);
        for (a, b) in refs.iter().zip(&out) {
            assert_eq!((a.label, &a.source_id), (b.label, &b.source_id));
            assert_eq!(b.modality.as_str(), "target");
            assert!(b.pixels.iter().all(|p| p.abs() < 1.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TranslatorState::new(&tiny_config(), 0.0, 1, Precision::F64).is_err());
        let mut cfg = tiny_config();
        cfg.discriminator.resolution = (16, 16);
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }
}
