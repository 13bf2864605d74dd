//! Small neural-network toolkit on top of candle: parameter stores, a few
//! layers, instance normalisation and Adam.
//!
//! Every network in the crate is built through [`ParamBuilder`], which either
//! draws fresh parameters from a seeded generator or adopts tensors from an
//! existing map (checkpoint load, deep clone). Layers hold [`Var`] handles and
//! can run either tracked (gradients flow into the parameters) or frozen
//! (parameters enter the graph detached).

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn of(dtype: DType) -> Result<Self> {
        match dtype {
            DType::F32 => Ok(Precision::F32),
            DType::F64 => Ok(Precision::F64),
            other => Err(Error::shape("f32 or f64", format!("{other:?}"))),
        }
    }
}

/// Whether a forward pass should record gradients for the layer parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Grad,
    Frozen,
}

impl Track {
    fn tensor(self, v: &Var) -> Tensor {
        match self {
            Track::Grad => v.as_tensor().clone(),
            Track::Frozen => v.as_tensor().detach(),
        }
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every tensor, keyed by name.
    pub fn to_tensor_map(&self) -> Result<HashMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Bit-exact copy of the current values, for freeze and replay checks.
    pub fn snapshot(&self) -> Result<ParamSnapshot> {
        let mut out = Vec::with_capacity(self.entries.len());
        for (name, var) in &self.entries {
            let bits = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?
                .into_iter()
                .map(f64::to_bits)
                .collect();
            out.push((name.clone(), bits));
        }
        Ok(ParamSnapshot(out))
    }

    /// Flattened values of all parameters, in insertion order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_elements());
        for (_, var) in &self.entries {
            out.extend(
                var.as_tensor()
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?,
            );
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSnapshot(pub Vec<(String, Vec<u64>)>);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
}

enum Source<'a> {
    Random(ChaCha8Rng),
    Tensors(&'a HashMap<String, Tensor>),
}

/// Creates (or adopts) the parameters of one network.
pub struct ParamBuilder<'a> {
    source: Source<'a>,
    params: Params,
    prefix: Vec<String>,
    dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub fn random(seed: u64, precision: Precision) -> Self {
        Self {
            source: Source::Random(ChaCha8Rng::seed_from_u64(seed)),
            params: Params::new(),
            prefix: Vec::new(),
            dtype: precision.dtype(),
        }
    }

    /// Adopt tensors from `map`; names are looked up with the current prefix.
    pub fn from_tensors(map: &'a HashMap<String, Tensor>, precision: Precision) -> Self {
        Self {
            source: Source::Tensors(map),
            params: Params::new(),
            prefix: Vec::new(),
            dtype: precision.dtype(),
        }
    }

    pub fn push_prefix(&mut self, p: impl Into<String>) {
        self.prefix.push(p.into());
    }

    pub fn pop_prefix(&mut self) {
        self.prefix.pop();
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.full_name(name);
        let n: usize = shape.iter().product();
        let tensor = match &mut self.source {
            Source::Random(rng) => {
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std)
                            .map_err(|e| Error::InvalidConfig(format!("init std {std}: {e}")))?;
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                };
                Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?
            }
            Source::Tensors(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{full}`")))?;
                if t.dims() != shape {
                    return Err(Error::shape(format!("{full} {shape:?}"), format!("{:?}", t.dims())));
                }
                t.to_dtype(self.dtype)?.copy()?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        self.params.insert(full, var.clone());
        Ok(var)
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: ConvSpec, init: Init) -> Result<Self> {
        pb.push_prefix(name);
        let weight = pb.var("weight", &[spec.c_out, spec.c_in, spec.kernel, spec.kernel], init)?;
        let bias = if spec.bias {
            Some(pb.var("bias", &[spec.c_out], Init::Zeros)?)
        } else {
            None
        };
        pb.pop_prefix();
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let p = self.padding;
        let y = conv2d_unfolded(x, &track.tensor(&self.weight), (p, p, p, p), self.stride)?;
        add_channel_bias(y, self.bias.as_ref(), track)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }
}

/// Fractionally strided convolution; weight layout is `(c_in, c_out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        spec: ConvSpec,
        output_padding: usize,
        init: Init,
    ) -> Result<Self> {
        pb.push_prefix(name);
        let weight = pb.var("weight", &[spec.c_in, spec.c_out, spec.kernel, spec.kernel], init)?;
        let bias = if spec.bias {
            Some(pb.var("bias", &[spec.c_out], Init::Zeros)?)
        } else {
            None
        };
        pb.pop_prefix();
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let y = x.conv_transpose2d(
            &track.tensor(&self.weight),
            self.padding,
            self.output_padding,
            self.stride,
            1,
        )?;
        add_channel_bias(y, self.bias.as_ref(), track)
    }
}

/// Convolution of `x` `(B, C, H, W)` with `w` `(C_out, C, k, k)` written as
/// shifted slices and one matrix product, so the backward pass also reduces
/// to matrix products. `pad` is `(top, bottom, left, right)`.
pub fn conv2d_unfolded(x: &Tensor, w: &Tensor, pad: (usize, usize, usize, usize), stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 || stride == 0 {
        return Err(Error::shape(format!("{c} input channels, square kernel"), format!("{:?}", w.dims())));
    }
    let (top, bottom, left, right) = pad;
    let (hp, wp) = (h + top + bottom, wd + left + right);
    if hp < k || wp < k {
        return Err(Error::shape(format!("input of at least {k}x{k}"), format!("{hp}x{wp}")));
    }
    let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
    if stride == 1 && co < c {
        return conv2d_shifted(&x.pad_with_zeros(2, top, bottom)?.pad_with_zeros(3, left, right)?, w, ho, wo);
    }
    // Extra bottom/right zeros so every phase has the same size.
    let (hs, ws) = (((k - 1) / stride + ho) * stride, ((k - 1) / stride + wo) * stride);
    let xp = x
        .pad_with_zeros(2, top, bottom + hs.saturating_sub(hp))?
        .pad_with_zeros(3, left, right + ws.saturating_sub(wp))?
        .narrow(2, 0, hs)?
        .narrow(3, 0, ws)?;
    let phases = if stride == 1 {
        xp.unsqueeze(2)?.unsqueeze(2)?
    } else {
        xp.reshape((b, c, hs / stride, stride, ws / stride, stride))?
            .permute((0, 1, 3, 5, 2, 4))?
            .contiguous()?
    };
    let mut cols = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let phase = phases.narrow(2, i % stride, 1)?.narrow(3, j % stride, 1)?;
            cols.push(phase.narrow(4, i / stride, ho)?.narrow(5, j / stride, wo)?);
        }
    }
    let cols = Tensor::stack(&cols, 2)?.reshape((b, c * k * k, ho * wo))?;
    let y = w.reshape((co, c * k * k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, co, ho, wo))?)
}

/// Stride-1 convolution of a padded input as a sum of per-tap channel
/// mixes. Cheaper than unfolding when there are fewer output than input
/// channels.
fn conv2d_shifted(xp: &Tensor, w: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let (b, c, _, _) = xp.dims4()?;
    let (co, _, k, _) = w.dims4()?;
    let mut y: Option<Tensor> = None;
    for i in 0..k {
        for j in 0..k {
            let tap = w.narrow(2, i, 1)?.narrow(3, j, 1)?.reshape((co, c))?;
            let window = xp.narrow(2, i, ho)?.narrow(3, j, wo)?.contiguous()?.reshape((b, c, ho * wo))?;
            let term = tap.broadcast_matmul(&window)?;
            y = Some(match y {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
    }
    Ok(y.expect("kernel has at least one tap").reshape((b, co, ho, wo))?)
}

fn add_channel_bias(y: Tensor, bias: Option<&Var>, track: Track) -> Result<Tensor> {
    match bias {
        None => Ok(y),
        Some(b) => {
            let c = b.elem_count();
            Ok(y.broadcast_add(&track.tensor(b).reshape((1, c, 1, 1))?)?)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        pb.push_prefix(name);
        let weight = pb.var("weight", &[d_out, d_in], init)?;
        let bias = pb.var("bias", &[d_out], Init::Zeros)?;
        pb.pop_prefix();
        Ok(Self { weight, bias })
    }

    /// `x` is `(batch, d_in)`.
    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let w = track.tensor(&self.weight);
        Ok(x.matmul(&w.t()?)?.broadcast_add(&track.tensor(&self.bias))?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

/// Per-image, per-channel normalisation without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let out = centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()?.affine(1.0 - slope, 0.0)? + x.affine(slope, 0.0)?)?)
}

/// Reads a one-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn gan() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn standard() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let first = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            config,
            vars,
            first,
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps);
        let bc2 = 1.0 - beta2.powi(self.steps);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = (self.first[i].affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = (self.second[i].affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }
}
