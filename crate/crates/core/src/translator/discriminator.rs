use std::collections::HashMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::generator::check_batch;
use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, Conv2d, ConvSpec, Init, ParamBuilder, Params, Precision, Track};

const KERNEL: usize = 4;
const SLOPE: f64 = 0.2;
const MAX_MULT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub resolution: (usize, usize),
    pub base_filters: usize,
    /// Number of stride-2 convolutions; 3 gives the 70x70 receptive field.
    pub n_layers: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl DiscriminatorConfig {
    pub fn patch70(channels: usize, resolution: (usize, usize)) -> Self {
        Self {
            channels,
            resolution,
            base_filters: 64,
            n_layers: 3,
            init_std: default_init_std(),
        }
    }

    /// `(stride, kernel)` of every convolution in order.
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.n_layers];
        s.extend([1, 1]);
        s
    }

    /// Side of the input window seen by one output score.
    pub fn receptive_field(&self) -> usize {
        self.strides().iter().rev().fold(1, |rf, &s| (rf - 1) * s + KERNEL)
    }

    /// Spatial size of the score grid for the configured resolution.
    pub fn output_grid(&self) -> (usize, usize) {
        let side = |n: usize| {
            self.strides().iter().try_fold(n, |n, &s| {
                let padded = n + 2;
                (padded >= KERNEL).then(|| (padded - KERNEL) / s + 1)
            })
        };
        (side(self.resolution.0).unwrap_or(0), side(self.resolution.1).unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_filters == 0 || self.n_layers == 0 {
            return Err(Error::InvalidConfig("discriminator sizes must be positive".into()));
        }
        let (gh, gw) = self.output_grid();
        if gh == 0 || gw == 0 {
            return Err(Error::InvalidConfig(format!(
                "resolution {:?} too small for a {}-layer patch discriminator",
                self.resolution, self.n_layers
            )));
        }
        Ok(())
    }
}

/// Patch discriminator emitting one raw (unsquashed) score per receptive field.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    precision: Precision,
    prefix: String,
    params: Params,
    first: Conv2d,
    hidden: Vec<Conv2d>,
    last: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64, precision: Precision, prefix: &str) -> Result<Self> {
        Self::build(config, ParamBuilder::random(seed, precision), precision, prefix)
    }

    pub fn from_tensors(
        config: DiscriminatorConfig,
        tensors: &HashMap<String, Tensor>,
        precision: Precision,
        prefix: &str,
    ) -> Result<Self> {
        Self::build(config, ParamBuilder::from_tensors(tensors, precision), precision, prefix)
    }

    fn build(config: DiscriminatorConfig, mut pb: ParamBuilder<'_>, precision: Precision, prefix: &str) -> Result<Self> {
        config.validate()?;
        if !prefix.is_empty() {
            pb.push_prefix(prefix);
        }
        let init = Init::Normal(config.init_std);
        let conv = |c_in, c_out, stride, bias| ConvSpec {
            c_in,
            c_out,
            kernel: KERNEL,
            stride,
            padding: 1,
            bias,
        };
        let nf = config.base_filters;
        let first = Conv2d::new(&mut pb, "conv0", conv(config.channels, nf, 2, true), init)?;
        let mut hidden = Vec::with_capacity(config.n_layers);
        let mut mult = 1;
        for n in 1..=config.n_layers {
            let prev = mult;
            mult = (1 << n).min(MAX_MULT);
            let stride = if n < config.n_layers { 2 } else { 1 };
            hidden.push(Conv2d::new(&mut pb, &format!("conv{n}"), conv(nf * prev, nf * mult, stride, false), init)?);
        }
        let last = Conv2d::new(&mut pb, "score", conv(nf * mult, 1, 1, true), init)?;
        Ok(Self {
            config,
            precision,
            prefix: prefix.to_string(),
            params: pb.finish(),
            first,
            hidden,
            last,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    /// The final scoring convolution.
    pub fn score_layer(&self) -> &Conv2d {
        &self.last
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_tensors(self.config.clone(), &self.params.to_tensor_map()?, self.precision, &self.prefix)
    }

    /// Score grids of shape `(B, 1, gh, gw)`.
    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let (h, w) = self.config.resolution;
        check_batch(x, self.config.channels, h, w)?;
        let mut h = leaky_relu(&self.first.forward(x, track)?, SLOPE)?;
        for conv in &self.hidden {
            h = leaky_relu(&instance_norm(&conv.forward(&h, track)?)?, SLOPE)?;
        }
        self.last.forward(&h, track)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Tensor};

    use super::*;

    #[test]
    fn patch70_receptive_field_and_grid() {
        let cfg = DiscriminatorConfig::patch70(1, (128, 128));
        assert_eq!(cfg.receptive_field(), 70);
        assert_eq!(cfg.output_grid(), (14, 14));
        let small = DiscriminatorConfig {
            base_filters: 4,
            ..DiscriminatorConfig::patch70(1, (64, 64))
        };
        assert_eq!(small.output_grid(), (6, 6));
    }

    #[test]
    fn score_grid_is_patch_level() {
        let cfg = DiscriminatorConfig {
            base_filters: 2,
            ..DiscriminatorConfig::patch70(1, (128, 128))
        };
        let d = Discriminator::new(cfg, 3, Precision::F32, "D_t").unwrap();
        let x = Tensor::rand(-1f32, 1f32, (2, 1, 128, 128), &Device::Cpu).unwrap();
        let s = d.forward(&x, Track::Frozen).unwrap();
        assert_eq!(s.dims(), &[2, 1, 14, 14]);
    }

    #[test]
    fn duplicate_images_score_identically() {
        let cfg = DiscriminatorConfig {
            base_filters: 2,
            n_layers: 1,
            ..DiscriminatorConfig::patch70(1, (8, 8))
        };
        let d = Discriminator::new(cfg, 3, Precision::F64, "D").unwrap();
        let one = Tensor::rand(-1f64, 1f64, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let x = Tensor::cat(&[&one, &one], 0).unwrap();
        let s = d.forward(&x, Track::Frozen).unwrap();
        let a = s.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = s.get(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_score_layer_gives_zero_scores() {
        let cfg = DiscriminatorConfig {
            base_filters: 2,
            n_layers: 1,
            ..DiscriminatorConfig::patch70(1, (8, 8))
        };
        let d = Discriminator::new(cfg, 3, Precision::F64, "D").unwrap();
        let w = d.score_layer().weight();
        w.set(&w.as_tensor().zeros_like().unwrap()).unwrap();
        let x = Tensor::rand(-1f64, 1f64, (3, 1, 8, 8), &Device::Cpu).unwrap();
        let s = d.forward(&x, Track::Frozen).unwrap();
        assert_eq!(s.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn too_small_resolution_is_rejected() {
        let cfg = DiscriminatorConfig::patch70(1, (8, 8));
        assert!(cfg.validate().is_err());
    }
}
