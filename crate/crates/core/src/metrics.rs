//! Test MSE, Inception Score and Fréchet distance over a pluggable feature
//! extractor.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Init, Linear, ParamBuilder, Precision, Track};
use crate::translator::check_batch;

pub const DEFAULT_IS_SPLITS: usize = 10;
const SYMMETRY_TOL: f64 = 1e-8;

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(preds.iter().zip(labels).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / preds.len() as f64)
}

/// Class logits and feature vectors for a batch of images.
#[derive(Clone, Debug, Default)]
pub struct Extracted {
    pub logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

pub trait FeatureExtractor {
    /// Identifier written next to every metric computed with this extractor.
    fn id(&self) -> String;
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// `batch` is `(B, C, H, W)` in `[-1, 1]`.
    fn extract(&self, batch: &Tensor) -> Result<Extracted>;
}

/// Small fixed-seed convolutional network used as a deterministic stand-in
/// for a pretrained classifier.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    channels: usize,
    resolution: (usize, usize),
    convs: Vec<Conv2d>,
    head: Linear,
    feature_dim: usize,
    num_classes: usize,
}

impl RandomConvExtractor {
    pub fn new(channels: usize, resolution: (usize, usize), num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || feature_dim == 0 {
            return Err(Error::InvalidConfig("extractor needs >= 2 classes and a positive feature size".into()));
        }
        let mut pb = ParamBuilder::random(seed, Precision::F64);
        let widths = [channels, 8, 16, feature_dim];
        let mut convs = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let spec = ConvSpec {
                c_in: w[0],
                c_out: w[1],
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
            };
            convs.push(Conv2d::new(&mut pb, &format!("conv{i}"), spec, Init::Normal((2.0 / (9 * w[0]) as f64).sqrt()))?);
        }
        let head = Linear::new(&mut pb, "head", feature_dim, num_classes, Init::Normal((1.0 / feature_dim as f64).sqrt()))?;
        Ok(Self {
            seed,
            channels,
            resolution,
            convs,
            head,
            feature_dim,
            num_classes,
        })
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> String {
        format!("random-conv-v1:seed={}:k={}:d={}", self.seed, self.num_classes, self.feature_dim)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, batch: &Tensor) -> Result<Extracted> {
        check_batch(batch, self.channels, self.resolution.0, self.resolution.1)?;
        let mut h = batch.to_dtype(DType::F64)?;
        for conv in &self.convs {
            h = conv.forward(&h, Track::Frozen)?.relu()?;
        }
        let features = h.mean(3)?.mean(2)?;
        let logits = self.head.forward(&features, Track::Frozen)?;
        Ok(Extracted {
            logits: rows(&logits)?,
            features: rows(&features)?,
        })
    }
}

pub fn extract_images(fx: &dyn FeatureExtractor, images: &[&LabeledImage], batch_size: usize) -> Result<Extracted> {
    let mut out = Extracted::default();
    for chunk in images.chunks(batch_size.max(1)) {
        let e = fx.extract(&images_to_tensor(chunk, DType::F64)?)?;
        out.logits.extend(e.logits);
        out.features.extend(e.features);
    }
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// IS from class conditionals `p(y|x_i)`: per split `exp(mean_i KL(p_i || p̄))`,
/// then mean and population standard deviation across splits.
pub fn inception_score_from_probs(probs: &[Vec<f64>], n_splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if n_splits == 0 || probs.len() < n_splits {
        return Err(Error::TooFewSamples {
            needed: n_splits.max(1),
            got: probs.len(),
        });
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::shape(format!("{k} classes"), "ragged probabilities"));
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let kl_mean = part
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, m)| v * (v / m).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(kl_mean.exp());
    }
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}

pub fn inception_score(fx: &dyn FeatureExtractor, images: &[&LabeledImage], n_splits: usize) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let e = extract_images(fx, images, 64)?;
    let probs: Vec<Vec<f64>> = e.logits.iter().map(|l| softmax(l)).collect();
    inception_score_from_probs(&probs, n_splits)
}

fn symmetric(name: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::shape("square matrix", format!("{}x{} {name}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Eigenvalues and vectors of a symmetric PSD matrix, negative eigenvalues
/// within tolerance clamped to 0.
fn psd_eigen(m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let scale = m.amax().max(1.0);
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    if min < -SYMMETRY_TOL * scale {
        return Err(Error::NotPsd(min));
    }
    Ok((eig.eigenvalues.map(|v| v.max(0.0)), eig.eigenvectors))
}

/// `Tr((Σa Σb)^{1/2})`, computed as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn matrix_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> Result<f64> {
    let a = symmetric("Sa", sa)?;
    let b = symmetric("Sb", sb)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let (vals, vecs) = psd_eigen(a)?;
    let root = &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    let inner = &root * b * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let (vals, _) = psd_eigen(inner)?;
    Ok(vals.iter().map(|v| v.sqrt()).sum())
}

/// Mean and unbiased covariance of row vectors.
pub fn mean_and_covariance(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = mean_and_covariance(a)?;
    let (mb, cb) = mean_and_covariance(b)?;
    if ma.len() != mb.len() {
        return Err(Error::LengthMismatch(ma.len(), mb.len()));
    }
    let cross = matrix_sqrt_product(&ca, &cb)?;
    Ok((ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross)
}

pub fn fid(fx: &dyn FeatureExtractor, a: &[&LabeledImage], b: &[&LabeledImage]) -> Result<f64> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: set.len() });
        }
    }
    let fa = extract_images(fx, a, 64)?;
    let fb = extract_images(fx, b, 64)?;
    fid_from_features(&fa.features, &fb.features)
}

/// IS of translated images and FID between translated and real target images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationMetrics {
    pub extractor: String,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub n_translated: usize,
    pub n_reference: usize,
}

pub fn translation_metrics(
    fx: &dyn FeatureExtractor,
    translated: &[&LabeledImage],
    reference: &[&LabeledImage],
    n_splits: usize,
) -> Result<TranslationMetrics> {
    let (is_mean, is_std) = inception_score(fx, translated, n_splits.min(translated.len()).max(1))?;
    Ok(TranslationMetrics {
        extractor: fx.id(),
        is_mean,
        is_std,
        fid: fid(fx, translated, reference)?,
        n_translated: translated.len(),
        n_reference: reference.len(),
    })
}
