//! Self-supervised objectives that share the ViT encoder with the RL agent:
//! Data2Vec feature regression, MAE reconstruction and momentum contrastive
//! learning.

use std::fmt;
use std::str::FromStr;

use pixrl_nn::layers::{Activation, Bind, Init, LayerNorm, Linear, Mlp, TransformerBlock};
use pixrl_nn::{ema_update, AdamConfig, AdamState, Container, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, MaskSet};
use crate::encoders::{images_from_u8, patchify, TokenMask, Vit, LATENT_LN_EPS};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxTask {
    None,
    Data2vec,
    Mae,
    Contrastive,
}

impl AuxTask {
    pub fn name(self) -> &'static str {
        match self {
            AuxTask::None => "none",
            AuxTask::Data2vec => "data2vec",
            AuxTask::Mae => "mae",
            AuxTask::Contrastive => "contrastive",
        }
    }
}

impl fmt::Display for AuxTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuxTask {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AuxTask::None),
            "data2vec" => Ok(AuxTask::Data2vec),
            "mae" => Ok(AuxTask::Mae),
            "contrastive" => Ok(AuxTask::Contrastive),
            other => Err(CoreError::Config(format!("unknown auxiliary task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxConfig {
    pub task: AuxTask,
    pub lr: f64,
    pub momentum_follow_rate: f64,
    pub data2vec_mask_ratio: f64,
    pub data2vec_top_k: usize,
    pub data2vec_beta: f64,
    /// Sum `K + 1` block outputs instead of `K`.
    pub data2vec_target_from_zero: bool,
    pub mae_mask_ratio: f64,
    pub mae_decoder_dim: usize,
    pub mae_decoder_depth: usize,
    pub mae_decoder_heads: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            task: AuxTask::None,
            lr: 1e-3,
            momentum_follow_rate: 0.05,
            data2vec_mask_ratio: 0.4,
            data2vec_top_k: 2,
            data2vec_beta: 2.0,
            data2vec_target_from_zero: false,
            mae_mask_ratio: 0.75,
            mae_decoder_dim: 64,
            mae_decoder_depth: 2,
            mae_decoder_heads: 4,
        }
    }
}

impl AuxConfig {
    /// Number of block outputs summed into a Data2Vec target.
    pub fn data2vec_terms(&self) -> usize {
        self.data2vec_top_k + usize::from(self.data2vec_target_from_zero)
    }
}

/// Row index of every masked token, sample-major, ascending within a sample.
fn masked_rows(masks: &[MaskSet]) -> Vec<(usize, usize)> {
    masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| m.masked.iter().map(move |&i| (0, b * m.num_patches + i)))
        .collect()
}

// ---------------------------------------------------------------- Data2Vec

#[derive(Clone, Debug)]
pub struct Data2VecTarget {
    /// Layer-normalized block outputs, `[B·N, D]` each.
    pub summands: Vec<Var>,
    pub target: Var,
}

/// Sum of parameter-free layer norms of the last `terms` block outputs of the
/// momentum encoder on the unmasked input. Nothing here carries gradient.
pub fn data2vec_target<T: Real>(
    g: &mut Graph<T>,
    vit: &Vit,
    momentum: &ParamStore<T>,
    patches: &Tensor<T>,
    batch: usize,
    terms: usize,
) -> Result<Data2VecTarget> {
    if terms == 0 {
        return Err(CoreError::Config("Data2Vec target needs at least one term".into()));
    }
    let p = Bind::frozen(momentum);
    let tokens = vit.embed(g, p, patches, batch, TokenMask::Full)?;
    let out = vit.forward(g, p, tokens, terms)?;
    let eps = T::lit(LATENT_LN_EPS);
    let mut summands = Vec::with_capacity(terms);
    for &a in &out.activations {
        summands.push(g.layer_norm(a, eps)?);
    }
    let mut target = summands[0];
    for &s in &summands[1..] {
        target = g.add(target, s)?;
    }
    Ok(Data2VecTarget { summands, target })
}

/// Head predictions at masked positions, `[Σ|mask|, D]`.
pub fn data2vec_predict<T: Real>(
    g: &mut Graph<T>,
    vit: &Vit,
    encoder: Bind<'_, T>,
    head: &Mlp,
    heads: Bind<'_, T>,
    patches: &Tensor<T>,
    masks: &[MaskSet],
) -> Result<Var> {
    let tokens = vit.embed(g, encoder, patches, masks.len(), TokenMask::MaskToken(masks))?;
    let out = vit.forward(g, encoder, tokens, 0)?;
    // the head is per-token, so gathering first is equivalent and cheaper
    let picked = g.rows(&[out.tokens], &masked_rows(masks))?;
    Ok(head.forward(g, heads, picked)?)
}

/// Mean smooth-L1 over every element of `pred − target`.
pub fn data2vec_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, beta: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(CoreError::Shape(format!("prediction {:?} vs target {:?}", g.shape(pred), g.shape(target))));
    }
    let d = g.sub(pred, target)?;
    let l = g.smooth_l1(d, T::lit(beta));
    Ok(g.mean_all(l))
}

#[allow(clippy::too_many_arguments)]
pub fn data2vec_objective<T: Real>(
    g: &mut Graph<T>,
    vit: &Vit,
    encoder: Bind<'_, T>,
    momentum: &ParamStore<T>,
    head: &Mlp,
    heads: Bind<'_, T>,
    images: &Tensor<T>,
    masks: &[MaskSet],
    cfg: &AuxConfig,
) -> Result<Var> {
    let batch = masks.len();
    let patches = patchify(images, vit.cfg.patch_size)?;
    let t = data2vec_target(g, vit, momentum, &patches, batch, cfg.data2vec_terms())?;
    let t = g.rows(&[t.target], &masked_rows(masks))?;
    let p = data2vec_predict(g, vit, encoder, head, heads, &patches, masks)?;
    data2vec_loss(g, p, t, cfg.data2vec_beta)
}

// --------------------------------------------------------------------- MAE

/// Light ViT decoder that reconstructs every patch from the visible latents.
#[derive(Clone, Debug)]
pub struct MaeDecoder {
    pub proj: Linear,
    pub mask_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub out: Linear,
    pub num_patches: usize,
}

impl MaeDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        embed_dim: usize,
        num_patches: usize,
        patch_dim: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::TruncNormal(0.02);
        let proj = Linear::new(store, "mae.proj", embed_dim, dim, init, rng)?;
        let mask_token = store.add("mae.mask_token", init.sample(&[1, dim], dim, rng))?;
        let pos_embed = store.add("mae.pos_embed", init.sample(&[num_patches, dim], dim, rng))?;
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("mae.block{i}"), dim, heads, dim, init, rng))
            .collect::<pixrl_nn::Result<_>>()?;
        let ln = LayerNorm::new(store, "mae.ln", dim)?;
        let out = Linear::new(store, "mae.out", dim, patch_dim, init, rng)?;
        Ok(Self { proj, mask_token, pos_embed, blocks, ln, out, num_patches })
    }

    /// `visible` holds `[B·V, D]` encoder tokens in mask-visible order.
    /// Returns `[B·N, patch_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, visible: Var, masks: &[MaskSet]) -> Result<Var> {
        let n = self.num_patches;
        let batch = masks.len();
        let h = self.proj.forward(g, p, visible)?;
        let token = p.var(g, self.mask_token);
        let mut index = Vec::with_capacity(batch * n);
        let mut next = 0;
        for m in masks {
            for i in 0..n {
                if m.is_masked(i) {
                    index.push((1, 0));
                } else {
                    index.push((0, next));
                    next += 1;
                }
            }
        }
        if next != g.shape(visible)[0] {
            return Err(CoreError::Shape(format!("{} visible tokens for masks keeping {next}", g.shape(visible)[0])));
        }
        let x = g.rows(&[h, token], &index)?;
        let pos = p.var(g, self.pos_embed);
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, p, x, batch, n)?;
        }
        let x = self.ln.forward(g, p, x)?;
        Ok(self.out.forward(g, p, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct MaeOutput {
    /// Encoder tokens over the visible patches only.
    pub encoder_tokens: Var,
    pub encoder_activations: Vec<Var>,
    pub pred: Var,
}

pub fn mae_forward<T: Real>(
    g: &mut Graph<T>,
    vit: &Vit,
    encoder: Bind<'_, T>,
    decoder: &MaeDecoder,
    heads: Bind<'_, T>,
    patches: &Tensor<T>,
    masks: &[MaskSet],
) -> Result<MaeOutput> {
    let tokens = vit.embed(g, encoder, patches, masks.len(), TokenMask::VisibleOnly(masks))?;
    let out = vit.forward(g, encoder, tokens, vit.blocks.len())?;
    let pred = decoder.forward(g, heads, out.tokens, masks)?;
    Ok(MaeOutput { encoder_tokens: out.tokens, encoder_activations: out.activations, pred })
}

/// Mean squared error over masked patches against per-patch normalized pixels.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, pred: Var, patches: &Tensor<T>, masks: &[MaskSet]) -> Result<Var> {
    if g.shape(pred) != patches.shape() {
        return Err(CoreError::Shape(format!("prediction {:?} vs patches {:?}", g.shape(pred), patches.shape())));
    }
    let index = masked_rows(masks);
    let dim = patches.cols();
    let mut target = Vec::with_capacity(index.len() * dim);
    for &(_, r) in &index {
        target.extend(augment::per_patch_normalize(patches.row(r), dim));
    }
    let target = g.input(Tensor::new(&[index.len(), dim], target)?);
    let picked = g.rows(&[pred], &index)?;
    let d = g.sub(picked, target)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

pub fn mae_objective<T: Real>(
    g: &mut Graph<T>,
    vit: &Vit,
    encoder: Bind<'_, T>,
    decoder: &MaeDecoder,
    heads: Bind<'_, T>,
    images: &Tensor<T>,
    masks: &[MaskSet],
) -> Result<Var> {
    let patches = patchify(images, vit.cfg.patch_size)?;
    let out = mae_forward(g, vit, encoder, decoder, heads, &patches, masks)?;
    mae_loss(g, out.pred, &patches, masks)
}

// ------------------------------------------------------------- contrastive

/// Projection head for queries/keys plus the bilinear similarity matrix.
#[derive(Clone, Debug)]
pub struct ContrastiveHead {
    pub proj: Mlp,
    pub w: ParamId,
}

impl ContrastiveHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Result<Self> {
        let proj = Mlp::new(store, "contrastive.proj", &[dim, dim, dim], Activation::Relu, Init::FanInUniform, rng)?;
        let w = store.add("contrastive.w", Init::FanInUniform.sample(&[dim, dim], dim, rng))?;
        Ok(Self { proj, w })
    }
}

/// Mean cross-entropy of `(qW)kᵀ` with the positive on the diagonal. Rows are
/// max-shifted inside the cross-entropy.
pub fn info_nce<T: Real>(g: &mut Graph<T>, queries: Var, keys: Var, w: Var) -> Result<Var> {
    let b = g.shape(queries)[0];
    if g.shape(keys)[0] != b {
        return Err(CoreError::Shape(format!("{b} queries vs {} keys", g.shape(keys)[0])));
    }
    let qw = g.matmul(queries, w)?;
    let logits = g.matmul_t(qw, keys, false, true)?;
    let targets: Vec<usize> = (0..b).collect();
    Ok(g.softmax_cross_entropy(logits, &targets)?)
}

/// Two independent random crops of each raw stack, as `[B, C, 84, 84]` images.
pub fn contrastive_pair<T: Real, R: Rng + ?Sized>(
    stacks: &[u8],
    batch: usize,
    channels: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let stack_len = channels * augment::INPUT_SIZE * augment::INPUT_SIZE;
    if stacks.len() != batch * stack_len {
        return Err(CoreError::Shape(format!("{} bytes for {batch} stacks", stacks.len())));
    }
    let crop_len = channels * augment::CROP_SIZE * augment::CROP_SIZE;
    let mut a = Vec::with_capacity(batch * crop_len);
    let mut b = Vec::with_capacity(batch * crop_len);
    for s in stacks.chunks_exact(stack_len) {
        augment::crop_into(s, channels, augment::random_offset(rng), &mut a)?;
        augment::crop_into(s, channels, augment::random_offset(rng), &mut b)?;
    }
    Ok((
        images_from_u8(&a, batch, channels, augment::CROP_SIZE)?,
        images_from_u8(&b, batch, channels, augment::CROP_SIZE)?,
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn contrastive_objective<T: Real>(
    g: &mut Graph<T>,
    vit: &Vit,
    encoder: Bind<'_, T>,
    momentum_encoder: &ParamStore<T>,
    head: &ContrastiveHead,
    heads: Bind<'_, T>,
    momentum_heads: &ParamStore<T>,
    view_q: &Tensor<T>,
    view_k: &Tensor<T>,
) -> Result<Var> {
    let zq = vit.encode(g, encoder, view_q)?;
    let q = head.proj.forward(g, heads, zq)?;
    let mk = Bind::frozen(momentum_encoder);
    let zk = vit.encode(g, mk, view_k)?;
    let k = head.proj.forward(g, Bind::frozen(momentum_heads), zk)?;
    let w = heads.var(g, head.w);
    info_nce(g, q, k, w)
}

// ------------------------------------------------------------------ module

#[derive(Clone, Debug)]
pub enum AuxNet {
    None,
    Data2Vec(Mlp),
    Mae(MaeDecoder),
    Contrastive(ContrastiveHead),
}

/// Input to one auxiliary step.
pub enum AuxInput<'a, T> {
    /// The RL batch's cropped images, `[B, C, 84, 84]`.
    Cropped(&'a Tensor<T>),
    /// Two crops of an independently sampled batch.
    Pair(&'a Tensor<T>, &'a Tensor<T>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuxStats {
    pub loss: f64,
    pub encoder_grad_norm: f64,
}

/// Task heads, momentum copies and the encoder moments used by aux steps.
#[derive(Debug)]
pub struct AuxModule<T> {
    pub cfg: AuxConfig,
    pub net: AuxNet,
    pub heads: ParamStore<T>,
    pub momentum_encoder: Option<ParamStore<T>>,
    pub momentum_heads: Option<ParamStore<T>>,
    pub encoder_adam: AdamState<T>,
    pub updates: u64,
}

impl<T: Real> AuxModule<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &AuxConfig, vit: Option<&Vit>, encoder: &ParamStore<T>, rng: &mut R) -> Result<Self> {
        let mut heads = ParamStore::new();
        let net = match (cfg.task, vit) {
            (AuxTask::None, _) => AuxNet::None,
            (_, None) => return Err(CoreError::Config(format!("aux task {} needs the ViT encoder", cfg.task))),
            (AuxTask::Data2vec, Some(v)) => {
                let d = v.cfg.embed_dim;
                if cfg.data2vec_terms() > v.cfg.depth {
                    return Err(CoreError::Config(format!(
                        "Data2Vec sums {} block outputs but the ViT has {}",
                        cfg.data2vec_terms(),
                        v.cfg.depth
                    )));
                }
                AuxNet::Data2Vec(Mlp::new(&mut heads, "data2vec.head", &[d, d, d], Activation::Relu, Init::FanInUniform, rng)?)
            }
            (AuxTask::Mae, Some(v)) => AuxNet::Mae(MaeDecoder::new(
                &mut heads,
                v.cfg.embed_dim,
                v.cfg.num_patches(),
                v.cfg.patch_dim(),
                cfg.mae_decoder_dim,
                cfg.mae_decoder_depth,
                cfg.mae_decoder_heads,
                rng,
            )?),
            (AuxTask::Contrastive, Some(v)) => AuxNet::Contrastive(ContrastiveHead::new(&mut heads, v.cfg.embed_dim, rng)?),
        };
        let momentum_encoder = matches!(cfg.task, AuxTask::Data2vec | AuxTask::Contrastive).then(|| encoder.duplicate());
        let momentum_heads = matches!(cfg.task, AuxTask::Contrastive).then(|| heads.duplicate());
        Ok(Self {
            cfg: cfg.clone(),
            net,
            heads,
            momentum_encoder,
            momentum_heads,
            encoder_adam: encoder.new_adam_state(),
            updates: 0,
        })
    }

    pub fn task(&self) -> AuxTask {
        self.cfg.task
    }

    /// Builds the task loss on `g` with the encoder bound trainable.
    pub fn objective<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vit: &Vit,
        encoder: &ParamStore<T>,
        input: AuxInput<'_, T>,
        rng: &mut R,
    ) -> Result<Option<Var>> {
        let enc = Bind::trainable(encoder);
        let heads = Bind::trainable(&self.heads);
        let n = vit.cfg.num_patches();
        let draw = |ratio: f64, batch: usize, rng: &mut R| -> Result<Vec<MaskSet>> {
            (0..batch).map(|_| augment::sample_mask(ratio, n, rng)).collect()
        };
        let loss = match (&self.net, input) {
            (AuxNet::None, _) => return Ok(None),
            (AuxNet::Data2Vec(head), AuxInput::Cropped(images)) => {
                let masks = draw(self.cfg.data2vec_mask_ratio, images.shape()[0], rng)?;
                let momentum = self.momentum_encoder.as_ref().expect("Data2Vec keeps a momentum encoder");
                data2vec_objective(g, vit, enc, momentum, head, heads, images, &masks, &self.cfg)?
            }
            (AuxNet::Mae(dec), AuxInput::Cropped(images)) => {
                let masks = draw(self.cfg.mae_mask_ratio, images.shape()[0], rng)?;
                mae_objective(g, vit, enc, dec, heads, images, &masks)?
            }
            (AuxNet::Contrastive(head), AuxInput::Pair(q, k)) => {
                let me = self.momentum_encoder.as_ref().expect("contrastive keeps a momentum encoder");
                let mh = self.momentum_heads.as_ref().expect("contrastive keeps momentum heads");
                contrastive_objective(g, vit, enc, me, head, heads, mh, q, k)?
            }
            _ => return Err(CoreError::Config(format!("wrong input kind for aux task {}", self.cfg.task))),
        };
        Ok(Some(loss))
    }

    /// One gradient step on encoder and heads, then the momentum updates.
    /// A no-op returning zero loss for task `none`.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        vit: Option<&Vit>,
        encoder: &mut ParamStore<T>,
        input: AuxInput<'_, T>,
        rng: &mut R,
    ) -> Result<AuxStats> {
        let Some(vit) = vit.filter(|_| self.cfg.task != AuxTask::None) else {
            return Ok(AuxStats::default());
        };
        let mut g = Graph::new();
        let Some(loss) = self.objective(&mut g, vit, encoder, input, rng)? else {
            return Ok(AuxStats::default());
        };
        let value = g.value(loss).item().as_f64();
        let grads = g.backward(loss);
        encoder.zero_grad();
        self.heads.zero_grad();
        encoder.accumulate(&g, &grads);
        self.heads.accumulate(&g, &grads);
        drop(grads);
        drop(g);
        let encoder_grad_norm = encoder.grad_norm();
        let adam = AdamConfig::with_lr(self.cfg.lr);
        encoder.adam_step_with(&mut self.encoder_adam, &adam);
        self.heads.adam_step(&adam);
        if let Some(m) = self.momentum_encoder.as_mut() {
            ema_update(m, encoder, self.cfg.momentum_follow_rate)?;
        }
        if let Some(m) = self.momentum_heads.as_mut() {
            ema_update(m, &self.heads, self.cfg.momentum_follow_rate)?;
        }
        self.updates += 1;
        Ok(AuxStats { loss: value, encoder_grad_norm })
    }

    /// `encoder` supplies the layout of the aux-side encoder moments.
    pub fn export(&self, encoder: &ParamStore<T>, c: &mut Container) {
        self.heads.export("aux.heads", c);
        if let Some(m) = &self.momentum_encoder {
            m.export("aux.momentum_encoder", c);
        }
        if let Some(m) = &self.momentum_heads {
            m.export("aux.momentum_heads", c);
        }
        encoder.export_adam_state(&self.encoder_adam, "aux.encoder_adam", c);
        c.insert("aux.updates", pixrl_nn::Entry::U64(vec![self.updates]));
    }

    pub fn import(&mut self, encoder: &ParamStore<T>, c: &Container) -> Result<()> {
        self.heads.import("aux.heads", c)?;
        if let Some(m) = self.momentum_encoder.as_mut() {
            m.import("aux.momentum_encoder", c)?;
        }
        if let Some(m) = self.momentum_heads.as_mut() {
            m.import("aux.momentum_heads", c)?;
        }
        self.encoder_adam = encoder.import_adam_state("aux.encoder_adam", c)?;
        self.updates = c.u64s("aux.updates")?.first().copied().unwrap_or(0);
        Ok(())
    }
}
