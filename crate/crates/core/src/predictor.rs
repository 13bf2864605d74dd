//! Regression network `P` and the combined real plus translated prediction loss.
//!
//! The backbone is a residual convolutional network without normalisation
//! layers, so absolute intensities survive to the regression head. Outputs are
//! in label units: `offset + scale * head(features)`.

use std::collections::HashMap;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, labels_to_tensor, LabeledImage, ModalityDataset};
use crate::error::{Error, Result};
use crate::nn::{scalar, Conv2d, ConvSpec, Init, Linear, ParamBuilder, Params, Precision, Track};
use crate::translator::{check_batch, translate_images, Generator, ImageMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand by four.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub channels: usize,
    pub resolution: (usize, usize),
    pub base_filters: usize,
    /// Residual blocks per stage. Every stage after the first halves the
    /// spatial size and doubles the width.
    pub stages: Vec<usize>,
    #[serde(default)]
    pub block: BlockKind,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    #[serde(default)]
    pub stem_pool: bool,
    #[serde(default)]
    pub zero_init_residual: bool,
    #[serde(default)]
    pub label_offset: f64,
    #[serde(default = "one")]
    pub label_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl PredictorConfig {
    /// Four basic blocks on a stride-2 stem, roughly 75k parameters.
    pub fn small(channels: usize, resolution: (usize, usize)) -> Self {
        Self {
            channels,
            resolution,
            base_filters: 8,
            stages: vec![1, 1, 1, 1],
            block: BlockKind::Basic,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            zero_init_residual: false,
            label_offset: 0.0,
            label_scale: 1.0,
        }
    }

    /// The 50-layer bottleneck layout: 7x7 stem, max pool, stages 3-4-6-3.
    pub fn resnet50(channels: usize, resolution: (usize, usize)) -> Self {
        Self {
            channels,
            resolution,
            base_filters: 64,
            stages: vec![3, 4, 6, 3],
            block: BlockKind::Bottleneck,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            zero_init_residual: true,
            label_offset: 0.0,
            label_scale: 1.0,
        }
    }

    pub fn with_label_range(mut self, offset: f64, scale: f64) -> Self {
        self.label_offset = offset;
        self.label_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("predictor: {m}")));
        if self.channels == 0 || self.base_filters == 0 || self.stem_stride == 0 {
            return bad("sizes must be positive");
        }
        if self.stages.is_empty() || self.stages.contains(&0) {
            return bad("every stage needs at least one block");
        }
        if self.stem_kernel % 2 == 0 {
            return bad("stem kernel must be odd");
        }
        if !(self.label_scale > 0.0 && self.label_scale.is_finite() && self.label_offset.is_finite()) {
            return bad("label scale must be positive and finite");
        }
        Ok(())
    }

    fn expansion(&self) -> usize {
        match self.block {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        (self.base_filters << (self.stages.len() - 1)) * self.expansion()
    }
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<(Conv2d, bool)>,
    shortcut: Option<Conv2d>,
}

impl Block {
    fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, _)) in self.convs.iter().enumerate() {
            h = conv.forward(&h, track)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, track)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

/// Regression network `P`.
#[derive(Clone, Debug)]
pub struct Predictor {
    config: PredictorConfig,
    precision: Precision,
    prefix: String,
    params: Params,
    stem: Conv2d,
    blocks: Vec<Block>,
    head: Linear,
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64, precision: Precision, prefix: &str) -> Result<Self> {
        Self::build(config, ParamBuilder::random(seed, precision), precision, prefix)
    }

    pub fn from_tensors(
        config: PredictorConfig,
        tensors: &HashMap<String, Tensor>,
        precision: Precision,
        prefix: &str,
    ) -> Result<Self> {
        Self::build(config, ParamBuilder::from_tensors(tensors, precision), precision, prefix)
    }

    fn build(config: PredictorConfig, mut pb: ParamBuilder<'_>, precision: Precision, prefix: &str) -> Result<Self> {
        config.validate()?;
        if !prefix.is_empty() {
            pb.push_prefix(prefix);
        }
        let conv = |c_in, c_out, kernel, stride| ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            padding: kernel / 2,
            bias: true,
        };
        let k = config.stem_kernel;
        let nf = config.base_filters;
        let stem = Conv2d::new(&mut pb, "stem", conv(config.channels, nf, k, config.stem_stride), he(config.channels * k * k))?;
        let exp = config.expansion();
        let mut c_in = nf;
        let mut blocks = Vec::new();
        for (s, &n) in config.stages.iter().enumerate() {
            let width = nf << s;
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let c_out = width * exp;
                let name = format!("stage{s}.block{b}");
                pb.push_prefix(name);
                let last_init = |fan_in| if config.zero_init_residual { Init::Zeros } else { he(fan_in) };
                let convs = match config.block {
                    BlockKind::Basic => vec![
                        (Conv2d::new(&mut pb, "conv0", conv(c_in, width, 3, stride), he(c_in * 9))?, true),
                        (Conv2d::new(&mut pb, "conv1", conv(width, width, 3, 1), last_init(width * 9))?, false),
                    ],
                    BlockKind::Bottleneck => vec![
                        (Conv2d::new(&mut pb, "conv0", conv(c_in, width, 1, 1), he(c_in))?, true),
                        (Conv2d::new(&mut pb, "conv1", conv(width, width, 3, stride), he(width * 9))?, true),
                        (Conv2d::new(&mut pb, "conv2", conv(width, c_out, 1, 1), last_init(width))?, false),
                    ],
                };
                let shortcut = if stride != 1 || c_in != c_out {
                    Some(Conv2d::new(&mut pb, "shortcut", conv(c_in, c_out, 1, stride), he(c_in))?)
                } else {
                    None
                };
                pb.pop_prefix();
                blocks.push(Block { convs, shortcut });
                c_in = c_out;
            }
        }
        let head = Linear::new(&mut pb, "head", c_in, 1, Init::Normal((1.0 / c_in as f64).sqrt()))?;
        Ok(Self {
            config,
            precision,
            prefix: prefix.to_string(),
            params: pb.finish(),
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_tensors(self.config.clone(), &self.params.to_tensor_map()?, self.precision, &self.prefix)
    }

    /// Pooled backbone features, `(B, feature_dim)`.
    pub fn features(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let (h, w) = self.config.resolution;
        check_batch(x, self.config.channels, h, w)?;
        let mut h = self.stem.forward(x, track)?.relu()?;
        if self.config.stem_pool {
            // Post-ReLU values are nonnegative, so zero padding acts as -inf padding.
            h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        }
        for block in &self.blocks {
            h = block.forward(&h, track)?;
        }
        Ok(h.mean(3)?.mean(2)?)
    }

    /// Maps features to labels through `head`.
    pub fn regress(&self, head: &Linear, features: &Tensor, track: Track) -> Result<Tensor> {
        let out = head.forward(features, track)?.squeeze(1)?;
        Ok(out.affine(self.config.label_scale, self.config.label_offset)?)
    }

    /// One scalar per image, `(B,)`.
    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        self.regress(&self.head, &self.features(x, track)?, track)
    }
}

/// Predictions for a batch, without gradient tracking.
pub fn predict(p: &Predictor, batch: &Tensor) -> Result<Vec<f64>> {
    Ok(p.forward(batch, Track::Frozen)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn predict_images(p: &Predictor, images: &[&LabeledImage], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        out.extend(predict(p, &images_to_tensor(chunk, p.precision().dtype())?)?);
    }
    Ok(out)
}

/// Images `(B, C, H, W)` with labels `(B,)`.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Tensor,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Tensor) -> Result<Self> {
        let n = images.dim(0)?;
        if labels.dims() != [n] {
            return Err(Error::shape(format!("({n},)"), format!("{:?}", labels.dims())));
        }
        Ok(Self { images, labels })
    }

    pub fn from_images(images: &[&LabeledImage], dtype: DType) -> Result<Self> {
        Self::new(images_to_tensor(images, dtype)?, labels_to_tensor(images, dtype)?)
    }

    pub fn len(&self) -> usize {
        self.labels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weights of the translated-source and real-target mean squared errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionWeights {
    pub source: f64,
    pub target: f64,
}

impl Default for PredictionWeights {
    fn default() -> Self {
        Self {
            source: 1.0,
            target: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PredictionLoss {
    pub total: Tensor,
    /// MSE of `P(G(y))` against source labels.
    pub source_mse: Option<f64>,
    /// MSE of `P(x)` against target labels.
    pub target_mse: Option<f64>,
}

impl PredictionLoss {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }
}

pub(crate) fn mse_tensor(pred: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok((pred - labels)?.sqr()?.mean_all()?)
}

/// Weighted sum of the translated-source and real-target MSEs. Source images
/// pass through `g` inside this call so gradients can reach it.
pub fn prediction_loss(
    p: &Predictor,
    g: &dyn ImageMap,
    source: Option<&LabeledBatch>,
    target: Option<&LabeledBatch>,
    weights: PredictionWeights,
    p_track: Track,
) -> Result<PredictionLoss> {
    let source = source.filter(|b| !b.is_empty());
    let target = target.filter(|b| !b.is_empty());
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            None => t,
            Some(acc) => (acc + t)?,
        });
        Ok(())
    };
    let mut source_mse = None;
    if let Some(b) = source {
        let translated = g.map(&b.images, Track::Grad)?;
        let m = mse_tensor(&p.forward(&translated, p_track)?, &b.labels)?;
        source_mse = Some(scalar(&m)?);
        add((m * weights.source)?)?;
    }
    let mut target_mse = None;
    if let Some(b) = target {
        let m = mse_tensor(&p.forward(&b.images, p_track)?, &b.labels)?;
        target_mse = Some(scalar(&m)?);
        add((m * weights.target)?)?;
    }
    let total = total.ok_or(Error::EmptyBatch)?;
    Ok(PredictionLoss {
        total,
        source_mse,
        target_mse,
    })
}

/// Runs a generator without recording gradients for its parameters.
pub struct Frozen<'a>(pub &'a Generator);

impl ImageMap for Frozen<'_> {
    fn map(&self, x: &Tensor, _track: Track) -> Result<Tensor> {
        self.0.forward(x, Track::Frozen)
    }
}

/// Mixes `{(G(y_i), r_i)}` with `{(x_i, r_i)}` into shuffled batches covering
/// both sets exactly once. Translations come from the current `g`.
pub fn build_combined_training_view<R: Rng + ?Sized>(
    source: &ModalityDataset,
    target: &ModalityDataset,
    g: &Generator,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<LabeledImage>>> {
    if source.is_empty() && target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let refs: Vec<&LabeledImage> = source.images().iter().collect();
    let mut items = if refs.is_empty() {
        Vec::new()
    } else {
        translate_images(g, &refs, target.modality(), 64)?
    };
    items.extend(target.images().iter().cloned());
    items.shuffle(rng);
    Ok(items.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect())
}
