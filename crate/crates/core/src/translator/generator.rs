use std::collections::HashMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, Conv2d, ConvSpec, ConvTranspose2d, Init, ParamBuilder, Params, Precision, Track};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Encoder, residual stack, decoder, tanh.
    #[default]
    Resnet,
    /// Parameter-free `tanh(x)`, used to debug the translation pipeline.
    DebugIdentity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub resolution: (usize, usize),
    pub base_filters: usize,
    pub n_downsampling: usize,
    pub n_residual_blocks: usize,
    /// Kernel of the first and last convolution.
    pub edge_kernel: usize,
    #[serde(default)]
    pub kind: GeneratorKind,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl GeneratorConfig {
    /// Full-size defaults: 64 base filters, two stride-2 stages, 9 residual
    /// blocks from 256 pixels up and 6 below.
    pub fn for_resolution(channels: usize, resolution: (usize, usize)) -> Self {
        let n_residual_blocks = if resolution.0.min(resolution.1) >= 256 { 9 } else { 6 };
        Self {
            channels,
            resolution,
            base_filters: 64,
            n_downsampling: 2,
            n_residual_blocks,
            edge_kernel: 7,
            kind: GeneratorKind::Resnet,
            init_std: default_init_std(),
        }
    }

    pub fn debug_identity(channels: usize, resolution: (usize, usize)) -> Self {
        Self {
            kind: GeneratorKind::DebugIdentity,
            ..Self::for_resolution(channels, resolution)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_filters == 0 {
            return Err(Error::InvalidConfig("generator channels and filters must be positive".into()));
        }
        if self.edge_kernel % 2 == 0 {
            return Err(Error::InvalidConfig("generator edge kernel must be odd".into()));
        }
        let factor = 1usize << self.n_downsampling;
        if self.resolution.0 % factor != 0 || self.resolution.1 % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "resolution {:?} not divisible by 2^{}",
                self.resolution, self.n_downsampling
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResnetLayers {
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    up: Vec<ConvTranspose2d>,
    head: Conv2d,
}

/// Image-to-image generator (`G` or `F`).
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    precision: Precision,
    prefix: String,
    params: Params,
    layers: Option<ResnetLayers>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, precision: Precision, prefix: &str) -> Result<Self> {
        Self::build(config, ParamBuilder::random(seed, precision), precision, prefix)
    }

    pub fn from_tensors(
        config: GeneratorConfig,
        tensors: &HashMap<String, Tensor>,
        precision: Precision,
        prefix: &str,
    ) -> Result<Self> {
        Self::build(config, ParamBuilder::from_tensors(tensors, precision), precision, prefix)
    }

    fn build(config: GeneratorConfig, mut pb: ParamBuilder<'_>, precision: Precision, prefix: &str) -> Result<Self> {
        config.validate()?;
        if !prefix.is_empty() {
            pb.push_prefix(prefix);
        }
        let layers = match config.kind {
            GeneratorKind::DebugIdentity => None,
            GeneratorKind::Resnet => Some(Self::build_resnet(&config, &mut pb)?),
        };
        let params = pb.finish();
        Ok(Self {
            config,
            precision,
            prefix: prefix.to_string(),
            params,
            layers,
        })
    }

    fn build_resnet(cfg: &GeneratorConfig, pb: &mut ParamBuilder<'_>) -> Result<ResnetLayers> {
        let init = Init::Normal(cfg.init_std);
        let conv = |c_in, c_out, kernel, stride, bias| ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            padding: kernel / 2,
            bias,
        };
        let nf = cfg.base_filters;
        let stem = Conv2d::new(pb, "stem", conv(cfg.channels, nf, cfg.edge_kernel, 1, false), init)?;
        let mut down = Vec::with_capacity(cfg.n_downsampling);
        for i in 0..cfg.n_downsampling {
            let c = nf << i;
            down.push(Conv2d::new(pb, &format!("down{i}"), conv(c, 2 * c, 3, 2, false), init)?);
        }
        let width = nf << cfg.n_downsampling;
        let mut blocks = Vec::with_capacity(cfg.n_residual_blocks);
        for i in 0..cfg.n_residual_blocks {
            let a = Conv2d::new(pb, &format!("block{i}.conv0"), conv(width, width, 3, 1, false), init)?;
            let b = Conv2d::new(pb, &format!("block{i}.conv1"), conv(width, width, 3, 1, false), init)?;
            blocks.push((a, b));
        }
        let mut up = Vec::with_capacity(cfg.n_downsampling);
        for i in 0..cfg.n_downsampling {
            let c = width >> i;
            up.push(ConvTranspose2d::new(pb, &format!("up{i}"), conv(c, c / 2, 3, 2, false), 1, init)?);
        }
        let head = Conv2d::new(pb, "head", conv(nf, cfg.channels, cfg.edge_kernel, 1, true), init)?;
        Ok(ResnetLayers {
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_tensors(self.config.clone(), &self.params.to_tensor_map()?, self.precision, &self.prefix)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w) = self.config.resolution;
        check_batch(x, self.config.channels, h, w)
    }

    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        self.check_input(x)?;
        let Some(l) = &self.layers else {
            return Ok(x.tanh()?);
        };
        let mut h = instance_norm(&l.stem.forward(x, track)?)?.relu()?;
        for conv in &l.down {
            h = instance_norm(&conv.forward(&h, track)?)?.relu()?;
        }
        for (a, b) in &l.blocks {
            let r = instance_norm(&a.forward(&h, track)?)?.relu()?;
            let r = instance_norm(&b.forward(&r, track)?)?;
            h = (h + r)?;
        }
        for conv in &l.up {
            h = instance_norm(&conv.forward(&h, track)?)?.relu()?;
        }
        Ok(l.head.forward(&h, track)?.tanh()?)
    }
}

pub(crate) fn check_batch(x: &Tensor, channels: usize, h: usize, w: usize) -> Result<()> {
    match x.dims() {
        [b, c, hh, ww] if *c == channels && *hh == h && *ww == w => {
            if *b == 0 {
                Err(Error::EmptyBatch)
            } else {
                Ok(())
            }
        }
        dims => Err(Error::shape(format!("(B, {channels}, {h}, {w})"), format!("{dims:?}"))),
    }
}
