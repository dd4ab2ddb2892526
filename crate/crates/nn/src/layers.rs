//! Parameterized building blocks.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`]. A forward
//! pass takes a [`Bind`], which decides whether the store's tensors enter the
//! graph as trainable parameters or as frozen constants. The same layer code
//! therefore serves online networks, EMA targets and frozen critics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::Result;

/// How a store's parameters enter a graph.
#[derive(Clone, Copy)]
pub struct Bind<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Bind<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: false }
    }

    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanInUniform,
    Uniform(f64),
}

impl Init {
    pub fn sample<T: Real, R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, T::lit(c)),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break T::lit(x);
                    }
                })
            }
            Init::FanInUniform => {
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-a..=a)))
            }
            Init::Uniform(a) => Tensor::from_fn(shape, |_| T::lit(rng.random_range(-a..=a))),
        }
    }
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), init.sample(&[in_dim, out_dim], in_dim, rng))?;
        let bias = match init {
            Init::FanInUniform => Init::FanInUniform.sample(&[out_dim], in_dim, rng),
            _ => Tensor::zeros(&[out_dim]),
        };
        let b = store.add(&format!("{name}.b"), bias)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta, eps: Self::DEFAULT_EPS })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, T::lit(self.eps))?;
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        let y = g.mul(y, gamma)?;
        g.add(y, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Stack of linear layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `dims` lists every width, input first: `[in, h1, …, out]`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        act: Activation,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, act })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = self.act.apply(g, h);
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product self-attention over `[B·N, D]` token rows.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    /// Fused projection, columns `[q | k | v]`.
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(crate::NnError::Shape(format!("dim {dim} not divisible by {heads} heads")));
        }
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, init, rng)?;
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, init, rng)?;
        Ok(Self { qkv, out, heads })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let h = self.heads;
        let hd = self.out.out_dim / h;
        let qkv = self.qkv.forward(g, p, x)?;
        let q = g.split_heads(qkv, batch, seq, h, 0, 3)?;
        let k = g.split_heads(qkv, batch, seq, h, 1, 3)?;
        let v = g.split_heads(qkv, batch, seq, h, 2, 3)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (hd as f64).sqrt()));
        let attn = g.softmax(scores);
        let ctx = g.batch_matmul(attn, v, false)?;
        let merged = g.merge_heads(ctx, batch, seq, h)?;
        self.out.forward(g, p, merged)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, init, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, mlp_hidden, dim], Activation::Gelu, init, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, batch, seq)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Valid 2-D convolution layer, `w [out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(&format!("{name}.w"), Init::FanInUniform.sample(&[out_ch, in_ch, kernel, kernel], fan_in, rng))?;
        let b = store.add(&format!("{name}.b"), Init::FanInUniform.sample(&[out_ch], fan_in, rng))?;
        Ok(Self { w, b, stride })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        g.conv2d(x, w, b, self.stride)
    }
}
