//! Observation encoders: a small ViT and a RAD-style CNN, both mapping a
//! cropped frame stack to a layer-normalized latent vector.

use pixrl_nn::layers::{Bind, Conv2d, Init, LayerNorm, Linear, TransformerBlock};
use pixrl_nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::MaskSet;
use crate::{CoreError, Result};

pub const LATENT_LN_EPS: f64 = 1e-5;

/// Scales 8-bit pixels into `[0, 1]` and shapes them `[batch, channels, size, size]`.
pub fn images_from_u8<T: Real>(pixels: &[u8], batch: usize, channels: usize, size: usize) -> Result<Tensor<T>> {
    let inv = 1.0 / 255.0;
    let data = pixels.iter().map(|&p| T::lit(p as f64 * inv)).collect();
    Ok(Tensor::new(&[batch, channels, size, size], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { image_size: 84, in_channels: 9, patch_size: 12, embed_dim: 128, depth: 4, heads: 8, mlp_dim: 128 }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(CoreError::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Cuts `[batch, C, S, S]` images into non-overlapping `p × p` patches in
/// row-major grid order. Each row of the result is one patch laid out
/// channel-major, then row, then column.
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[batch, c, h, w] = images.shape() else {
        return Err(CoreError::Shape(format!("patchify expects [B, C, H, W], got {:?}", images.shape())));
    };
    if h != w || patch == 0 || h % patch != 0 {
        return Err(CoreError::Shape(format!("cannot cut {h}×{w} images into {patch}-pixel patches")));
    }
    let g = h / patch;
    let dim = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    let plane = &src[(b * c + ch) * h * w..];
                    for r in 0..patch {
                        let start = (gy * patch + r) * w + gx * patch;
                        out.extend_from_slice(&plane[start..start + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[batch * g * g, dim], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, batch: usize, channels: usize, patch: usize) -> Result<Tensor<T>> {
    let n = patches.rows() / batch.max(1);
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || patches.cols() != channels * patch * patch || n * batch != patches.rows() {
        return Err(CoreError::Shape(format!("patches {:?} do not form a square grid", patches.shape())));
    }
    let s = g * patch;
    let mut out = vec![T::zero(); batch * channels * s * s];
    for b in 0..batch {
        for i in 0..n {
            let (gy, gx) = (i / g, i % g);
            let row = patches.row(b * n + i);
            for ch in 0..channels {
                for r in 0..patch {
                    let dst = ((b * channels + ch) * s + gy * patch + r) * s + gx * patch;
                    let src = (ch * patch + r) * patch;
                    out[dst..dst + patch].copy_from_slice(&row[src..src + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(&[batch, channels, s, s], out)?)
}

/// How masked patches are treated when embedding.
#[derive(Clone, Copy, Debug)]
pub enum TokenMask<'a> {
    Full,
    /// Masked positions carry the shared learnable mask token.
    MaskToken(&'a [MaskSet]),
    /// Masked positions are dropped; every sample must keep the same count.
    VisibleOnly(&'a [MaskSet]),
}

/// Embedded token rows `[batch·seq, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub var: Var,
    pub batch: usize,
    pub seq: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final block output, `[batch·seq, dim]`.
    pub tokens: Var,
    /// Outputs of the last K blocks, oldest first.
    pub activations: Vec<Var>,
    /// `[batch, dim]`, mean over tokens followed by parameter-free layer norm.
    pub latent: Var,
    pub seq: usize,
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: VitConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl Vit {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let init = Init::TruncNormal(0.02);
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(store, "vit.patch_embed", cfg.patch_dim(), d, init, rng)?;
        let pos_embed = store.add("vit.pos_embed", init.sample(&[cfg.num_patches(), d], d, rng))?;
        let mask_token = store.add("vit.mask_token", init.sample(&[1, d], d, rng))?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("vit.block{i}"), d, cfg.heads, cfg.mlp_dim, init, rng))
            .collect::<pixrl_nn::Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), patch_embed, pos_embed, mask_token, blocks })
    }

    /// Projects patches and adds positional embeddings.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, patches: &Tensor<T>, batch: usize, mask: TokenMask<'_>) -> Result<Tokens> {
        let n = self.cfg.num_patches();
        if patches.rows() != batch * n || patches.cols() != self.cfg.patch_dim() {
            return Err(CoreError::Shape(format!("expected {batch}×{n} patches of {}, got {:?}", self.cfg.patch_dim(), patches.shape())));
        }
        let check = |masks: &[MaskSet]| -> Result<()> {
            if masks.len() != batch || masks.iter().any(|m| m.num_patches != n) {
                return Err(CoreError::Shape(format!("need {batch} masks over {n} patches")));
            }
            Ok(())
        };
        let pos = p.var(g, self.pos_embed);
        match mask {
            TokenMask::Full => {
                let x = g.input(patches.clone());
                let e = self.patch_embed.forward(g, p, x)?;
                let var = g.add(e, pos)?;
                Ok(Tokens { var, batch, seq: n })
            }
            TokenMask::MaskToken(masks) => {
                check(masks)?;
                let x = g.input(patches.clone());
                let e = self.patch_embed.forward(g, p, x)?;
                let token = p.var(g, self.mask_token);
                let index: Vec<(usize, usize)> = (0..batch)
                    .flat_map(|b| (0..n).map(move |i| (b, i)))
                    .map(|(b, i)| if masks[b].is_masked(i) { (1, 0) } else { (0, b * n + i) })
                    .collect();
                let mixed = g.rows(&[e, token], &index)?;
                let var = g.add(mixed, pos)?;
                Ok(Tokens { var, batch, seq: n })
            }
            TokenMask::VisibleOnly(masks) => {
                check(masks)?;
                let visible: Vec<Vec<usize>> = masks.iter().map(MaskSet::visible).collect();
                let seq = visible[0].len();
                if seq == 0 || visible.iter().any(|v| v.len() != seq) {
                    return Err(CoreError::Shape("visible-only masks must keep the same nonzero count".into()));
                }
                // masked pixels never enter the graph
                let dim = patches.cols();
                let mut kept = Vec::with_capacity(batch * seq * dim);
                for (b, vis) in visible.iter().enumerate() {
                    for &i in vis {
                        kept.extend_from_slice(patches.row(b * n + i));
                    }
                }
                let x = g.input(Tensor::new(&[batch * seq, dim], kept)?);
                let e = self.patch_embed.forward(g, p, x)?;
                let pos_index: Vec<(usize, usize)> = visible.iter().flatten().map(|&i| (0, i)).collect();
                let pos_rows = g.rows(&[pos], &pos_index)?;
                let var = g.add(e, pos_rows)?;
                Ok(Tokens { var, batch, seq })
            }
        }
    }

    /// Runs the blocks, keeping the last `collect_last_k` block outputs.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, tokens: Tokens, collect_last_k: usize) -> Result<EncoderOutput> {
        let depth = self.blocks.len();
        if collect_last_k > depth {
            return Err(CoreError::Config(format!("cannot collect {collect_last_k} of {depth} blocks")));
        }
        let mut x = tokens.var;
        let mut activations = Vec::with_capacity(collect_last_k);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x, tokens.batch, tokens.seq)?;
            if i + collect_last_k >= depth {
                activations.push(x);
            }
        }
        let pooled = g.mean_tokens(x, tokens.seq)?;
        let latent = g.layer_norm(pooled, T::lit(LATENT_LN_EPS))?;
        Ok(EncoderOutput { tokens: x, activations, latent, seq: tokens.seq })
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, images: &Tensor<T>) -> Result<Var> {
        let batch = images.shape()[0];
        let patches = patchify(images, self.cfg.patch_size)?;
        let tokens = self.embed(g, p, &patches, batch, TokenMask::Full)?;
        Ok(self.forward(g, p, tokens, 0)?.latent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    /// One entry per conv layer.
    pub strides: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { image_size: 84, in_channels: 9, channels: 32, kernel: 3, strides: vec![2, 2, 1, 1], latent_dim: 128 }
    }
}

impl CnnConfig {
    /// Spatial side after every conv layer.
    pub fn feature_sizes(&self) -> Result<Vec<usize>> {
        let mut s = self.image_size;
        let mut out = Vec::with_capacity(self.strides.len());
        for &stride in &self.strides {
            if stride == 0 || s < self.kernel {
                return Err(CoreError::Config(format!("conv stack shrinks {}px input below the kernel", self.image_size)));
            }
            s = (s - self.kernel) / stride + 1;
            out.push(s);
        }
        Ok(out)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let s = self.feature_sizes()?.last().copied().unwrap_or(self.image_size);
        let c = if self.strides.is_empty() { self.in_channels } else { self.channels };
        Ok(c * s * s)
    }
}

/// Conv stack with ReLU after every layer, then linear → layer norm → tanh.
#[derive(Clone, Debug)]
pub struct Cnn {
    pub cfg: CnnConfig,
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub ln: LayerNorm,
}

impl Cnn {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &CnnConfig, rng: &mut R) -> Result<Self> {
        let flat = cfg.flat_dim()?;
        let mut convs = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, &stride) in cfg.strides.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("cnn.conv{i}"), in_ch, cfg.channels, cfg.kernel, stride, rng)?);
            in_ch = cfg.channels;
        }
        let fc = Linear::new(store, "cnn.fc", flat, cfg.latent_dim, Init::FanInUniform, rng)?;
        let ln = LayerNorm::new(store, "cnn.ln", cfg.latent_dim)?;
        Ok(Self { cfg: cfg.clone(), convs, fc, ln })
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, images: &Tensor<T>) -> Result<Var> {
        let batch = images.shape()[0];
        let mut x = g.input(images.clone());
        for conv in &self.convs {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
        }
        let flat = g.reshape(x, &[batch, self.cfg.flat_dim()?])?;
        let h = self.fc.forward(g, p, flat)?;
        let h = self.ln.forward(g, p, h)?;
        Ok(g.tanh(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Vit,
    Cnn,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Vit(Vit),
    Cnn(Cnn),
}

impl Encoder {
    pub fn latent_dim(&self) -> usize {
        match self {
            Encoder::Vit(v) => v.cfg.embed_dim,
            Encoder::Cnn(c) => c.cfg.latent_dim,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Vit(_) => EncoderKind::Vit,
            Encoder::Cnn(_) => EncoderKind::Cnn,
        }
    }

    pub fn as_vit(&self) -> Option<&Vit> {
        match self {
            Encoder::Vit(v) => Some(v),
            Encoder::Cnn(_) => None,
        }
    }

    /// `[batch, C, S, S]` images in `[0, 1]` → `[batch, latent]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, images: &Tensor<T>) -> Result<Var> {
        match self {
            Encoder::Vit(v) => v.encode(g, p, images),
            Encoder::Cnn(c) => c.encode(g, p, images),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EncoderConfig {
    Vit(VitConfig),
    Cnn(CnnConfig),
}

impl EncoderConfig {
    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderConfig::Vit(_) => EncoderKind::Vit,
            EncoderConfig::Cnn(_) => EncoderKind::Cnn,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            EncoderConfig::Vit(c) => c.image_size,
            EncoderConfig::Cnn(c) => c.image_size,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            EncoderConfig::Vit(c) => c.in_channels,
            EncoderConfig::Cnn(c) => c.in_channels,
        }
    }
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        Ok(match cfg {
            EncoderConfig::Vit(c) => Encoder::Vit(Vit::new(store, c, rng)?),
            EncoderConfig::Cnn(c) => Encoder::Cnn(Cnn::new(store, c, rng)?),
        })
    }
}
