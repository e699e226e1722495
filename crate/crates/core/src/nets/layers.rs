//! Parameter storage with seeded initialization and the handful of layers the
//! networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±gain · sqrt(6 / fan_in)`.
    Kaiming(f64),
    Zeros,
    Ones,
}

/// Named trainable tensors. Creation order is deterministic, so a seed fully
/// determines the initial weights.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), dtype, device: Device::Cpu, frozen: false }
    }

    /// A store whose tensors are constants: nothing is registered for training
    /// and no gradients are tracked for them.
    pub fn frozen(seed: u64, dtype: DType) -> Self {
        Self { frozen: true, ..Self::new(seed, dtype) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope { store: self, prefix: prefix.to_string() }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn into_vars(self) -> BTreeMap<String, Var> {
        self.vars
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if !self.frozen && self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter {name} declared twice")));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Kaiming(gain) => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        if self.frozen {
            return Ok(t);
        }
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(tensor)
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn push(&mut self, name: &str) -> Scope<'_> {
        Scope { store: self.store, prefix: format!("{}.{}", self.prefix, name) }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(format!("{}.{}", self.prefix, name), shape, init)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Conv> {
        self.conv_init(name, cin, cout, kernel, stride, Init::Kaiming(1.0))
    }

    pub fn conv_init(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Conv> {
        let mut s = self.push(name);
        let weight = s.param("weight", &[cout, cin, kernel, kernel], init)?;
        let bias = s.param("bias", &[cout], Init::Zeros)?;
        Ok(Conv { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.linear_init(name, fan_in, fan_out, Init::Kaiming(1.0))
    }

    pub fn linear_init(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Linear> {
        let mut s = self.push(name);
        let weight = s.param("weight", &[fan_out, fan_in], init)?;
        let bias = s.param("bias", &[fan_out], Init::Zeros)?;
        Ok(Linear { weight, bias })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let mut s = self.push(name);
        let gamma = s.param("gamma", &[dim], Init::Ones)?;
        let beta = s.param("beta", &[dim], Init::Zeros)?;
        Ok(LayerNorm { gamma, beta, eps: 1e-5 })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let c = self.out_channels();
        xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Normalizes the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let last = xs.rank() - 1;
        let mean = xs.mean_keepdim(last)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

pub fn leaky_relu(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.maximum(&(xs * 0.2)?)
}

/// Two 3×3 convolutions with an identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(s: &mut Scope, name: &str, channels: usize) -> Result<Self> {
        let mut s = s.push(name);
        Ok(Self {
            conv1: s.conv("conv1", channels, channels, 3, 1)?,
            conv2: s.conv_init("conv2", channels, channels, 3, 1, Init::Kaiming(0.5))?,
        })
    }
}

impl Module for ResBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(xs)?.relu()?;
        (self.conv2.forward(&h)? + xs)?.relu()
    }
}

/// 1×1 reduce → 3×3 (strided) → 1×1 expand, with a projected skip.
#[derive(Clone, Debug)]
pub struct ResBottleneck {
    reduce: Conv,
    spatial: Conv,
    expand: Conv,
    skip: Conv,
}

impl ResBottleneck {
    pub fn new(s: &mut Scope, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mut s = s.push(name);
        let mid = (cout / 2).max(4);
        Ok(Self {
            reduce: s.conv("reduce", cin, mid, 1, 1)?,
            spatial: s.conv("spatial", mid, mid, 3, stride)?,
            expand: s.conv_init("expand", mid, cout, 1, 1, Init::Kaiming(0.5))?,
            skip: s.conv("skip", cin, cout, 1, stride)?,
        })
    }
}

impl Module for ResBottleneck {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.reduce.forward(xs)?.relu()?;
        let h = self.spatial.forward(&h)?.relu()?;
        let h = self.expand.forward(&h)?;
        (h + self.skip.forward(xs)?)?.relu()
    }
}

/// Spatial softmax over the last `spatial` elements followed by the expected
/// coordinate. `logits (B,N,L)`, `coords (L,d)` → `(B,N,d)`.
pub fn soft_argmax(logits: &Tensor, coords: &Tensor) -> candle_core::Result<Tensor> {
    let (b, n, l) = logits.dims3()?;
    let probs = candle_nn::ops::softmax(logits, 2)?;
    let d = coords.dim(1)?;
    probs
        .reshape((b * n, l))?
        .matmul(coords)?
        .reshape((b, n, d))
}
