//! Parameter store and the small building blocks of the network.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }
}

/// Weight initialization rules.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean normal with variance `1 / fan_in`.
    VarianceScaling { fan_in: usize },
    Normal(f64),
    Const(f64),
}

/// Where layer parameters come from: fresh initialization or an existing
/// store (checkpoint load).
pub(crate) enum Source {
    Fresh(ChaCha8Rng),
    Existing(ParamStore),
}

/// Creates or fetches named parameters while the network is assembled.
pub(crate) struct Builder {
    source: Source,
    pub store: ParamStore,
    dtype: DType,
    device: Device,
    prefix: Vec<String>,
}

impl Builder {
    pub fn fresh(seed: u64, dtype: DType) -> Self {
        Builder {
            source: Source::Fresh(ChaCha8Rng::seed_from_u64(seed)),
            store: ParamStore::default(),
            dtype,
            device: Device::Cpu,
            prefix: Vec::new(),
        }
    }

    pub fn existing(store: ParamStore, dtype: DType) -> Self {
        Builder {
            source: Source::Existing(store),
            store: ParamStore::default(),
            dtype,
            device: Device::Cpu,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, p: impl Into<String>) -> &mut Self {
        self.prefix.push(p.into());
        self
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `p` appended to the name prefix.
    pub fn scope<T>(&mut self, p: impl Into<String>, f: impl FnOnce(&mut Builder) -> T) -> T {
        self.push(p);
        let out = f(self);
        self.pop();
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor, ModelError> {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let var = match &mut self.source {
            Source::Fresh(rng) => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::VarianceScaling { fan_in } => {
                        let d = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
                        (0..n).map(|_| d.sample(rng)).collect()
                    }
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| d.sample(rng)).collect()
                    }
                    Init::Const(c) => vec![c; n],
                };
                let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
                Var::from_tensor(&t)?
            }
            Source::Existing(store) => {
                let v = store.get(&full).ok_or_else(|| ModelError::MissingParameter(full.clone()))?;
                if v.dims() != shape {
                    return Err(ModelError::ParameterShape {
                        name: full,
                        expected: shape.to_vec(),
                        found: v.dims().to_vec(),
                    });
                }
                if v.dtype() != self.dtype {
                    Var::from_tensor(&v.to_dtype(self.dtype)?)?
                } else {
                    v.clone()
                }
            }
        };
        let t = var.as_tensor().clone();
        self.store.insert(full, var);
        Ok(t)
    }

    /// Fails if an existing store holds parameters the network did not use.
    pub fn finish(self) -> Result<ParamStore, ModelError> {
        if let Source::Existing(src) = &self.source {
            if let Some((name, _)) = src.iter().find(|(n, _)| self.store.get(n).is_none()) {
                return Err(ModelError::UnexpectedParameter(name.clone()));
            }
        }
        Ok(self.store)
    }
}

/// Applies a linear map over the last dimension of `x`.
pub(crate) fn apply_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().expect("rank >= 1");
    let rows = x.elem_count() / last;
    let out = w.dim(1)?;
    let y = super::ops::bias_add(&x.reshape((rows, last))?.matmul(w)?, b)?;
    let mut out_dims = dims;
    *out_dims.last_mut().expect("rank >= 1") = out;
    y.reshape(out_dims)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Elu,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::None => Ok(x.clone()),
            Activation::Elu => super::ops::elu(x),
            Activation::Relu => x.relu(),
            Activation::Gelu => super::ops::gelu(x),
        }
    }
}

/// Fully connected layer, weight stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub(crate) fn new(bld: &mut Builder, name: &str, inp: usize, out: usize) -> Result<Self, ModelError> {
        Self::with_bias(bld, name, inp, out, 0.0)
    }

    pub(crate) fn with_bias(bld: &mut Builder, name: &str, inp: usize, out: usize, bias: f64) -> Result<Self, ModelError> {
        bld.scope(name, |b| {
            Ok(Linear {
                w: b.param("weight", &[inp, out], Init::VarianceScaling { fan_in: inp })?,
                b: b.param("bias", &[out], Init::Const(bias))?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        apply_linear(x, &self.w, &self.b)
    }
}

/// Stack of linear layers; `acts[i]` follows layer `i`.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    pub(crate) fn new(bld: &mut Builder, name: &str, inp: usize, widths: &[usize], acts: &[Activation]) -> Result<Self, ModelError> {
        bld.scope(name, |b| {
            let mut layers = Vec::with_capacity(widths.len());
            let mut fan = inp;
            for (i, (&w, &a)) in widths.iter().zip(acts).enumerate() {
                layers.push((Linear::new(b, &i.to_string(), fan, w)?, a));
                fan = w;
            }
            Ok(Mlp { layers })
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for (l, a) in &self.layers {
            h = a.apply(&l.forward(&h)?)?;
        }
        Ok(h)
    }
}

/// 1-D convolution along the frame axis (second to last dimension) with
/// zero "same" padding, applied independently to every leading index.
///
/// Implemented as a concatenation of shifted copies followed by one matrix
/// product; the weight is `(kernel * in) x out`, tap-major.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    kernel: usize,
    lin: Linear,
}

impl TemporalConv {
    pub(crate) fn new(bld: &mut Builder, name: &str, inp: usize, out: usize, kernel: usize) -> Result<Self, ModelError> {
        if kernel % 2 == 0 {
            return Err(ModelError::Config(format!("temporal kernel {kernel} must be odd")));
        }
        let lin = bld.scope(name, |b| -> Result<Linear, ModelError> {
            Ok(Linear {
                w: b.param("weight", &[kernel * inp, out], Init::VarianceScaling { fan_in: kernel * inp })?,
                b: b.param("bias", &[out], Init::Const(0.0))?,
            })
        })?;
        Ok(TemporalConv { kernel, lin })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        if self.kernel == 1 {
            return self.lin.forward(x);
        }
        let rank = x.rank();
        let fdim = rank - 2;
        let frames = x.dim(fdim)?;
        let half = self.kernel / 2;
        let padded = x.pad_with_zeros(fdim, half, half)?;
        let taps = (0..self.kernel)
            .map(|k| padded.narrow(fdim, k, frames))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let stacked = Tensor::cat(&taps, rank - 1)?;
        self.lin.forward(&stacked)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(bld: &mut Builder, name: &str, dim: usize) -> Result<Self, ModelError> {
        bld.scope(name, |b| {
            Ok(LayerNorm {
                gamma: b.param("gamma", &[dim], Init::Const(1.0))?,
                beta: b.param("beta", &[dim], Init::Const(0.0))?,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        super::ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Softmax over the last dimension.
pub(crate) fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&s)
}
