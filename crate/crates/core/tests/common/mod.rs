//! Shared fixtures: tiny model configs and the finite-difference gradient
//! suite covering every graph op and every training loss.

#![allow(dead_code)]

use pixrl::augment::{sample_mask, MaskSet};
use pixrl::auxtasks::{
    contrastive_objective, data2vec_objective, info_nce, mae_objective, AuxConfig, AuxModule, AuxNet, AuxTask,
};
use pixrl::encoders::{CnnConfig, EncoderConfig, VitConfig};
use pixrl::sac::{actor_loss, alpha_loss, critic_loss, standard_normal, Agent, SacConfig};
use pixrl_nn::layers::{Activation, Bind, Init, LayerNorm, Mlp, MultiHeadAttention, TransformerBlock};
use pixrl_nn::{Graph, ParamStore, Tensor, Var};
use pixrl_numcheck::{compare_grads, finite_diff_grad, DEFAULT_EPS, DEFAULT_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// 8×8 two-channel images cut into four 4×4 patches, 8-dim tokens.
pub fn tiny_vit() -> VitConfig {
    VitConfig { image_size: 8, in_channels: 2, patch_size: 4, embed_dim: 8, depth: 2, heads: 2, mlp_dim: 8 }
}

pub fn tiny_cnn() -> CnnConfig {
    CnnConfig { image_size: 9, in_channels: 2, channels: 3, kernel: 3, strides: vec![2, 1], latent_dim: 8 }
}

pub fn tiny_sac(action_dim: usize) -> SacConfig {
    SacConfig { hidden: 16, ..SacConfig::new(action_dim) }
}

pub fn tiny_aux(task: AuxTask) -> AuxConfig {
    AuxConfig {
        task,
        data2vec_mask_ratio: 0.5,
        mae_mask_ratio: 0.5,
        mae_decoder_dim: 4,
        mae_decoder_depth: 1,
        mae_decoder_heads: 2,
        ..AuxConfig::default()
    }
}

/// Shifts every parameter by a small random amount so that layer-norm
/// scales, zero biases and EMA copies are not at special values.
pub fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amount..amount));
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements skipped because finite differences straddled a kink.
    pub excluded: usize,
    pub passed: bool,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.2e} over {} elements ({} kink-excluded) {}",
            self.name,
            self.max_rel_err,
            self.checked,
            self.excluded,
            if self.passed { "ok" } else { "FAILED" }
        )
    }
}

fn outcome(name: String, analytic: &[f64], numeric: &[f64], kinks: &[usize]) -> CheckOutcome {
    let keep: Vec<usize> = (0..analytic.len()).filter(|i| kinks.binary_search(i).is_err()).collect();
    let a: Vec<f64> = keep.iter().map(|&i| analytic[i]).collect();
    let n: Vec<f64> = keep.iter().map(|&i| numeric[i]).collect();
    let report = compare_grads(&name, &a, &n, DEFAULT_TOLERANCE);
    CheckOutcome {
        name,
        max_rel_err: report.max_rel_err,
        checked: keep.len(),
        excluded: analytic.len() - keep.len(),
        passed: report.passed,
    }
}

/// Random projection to a scalar so every output element gets its own weight.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    if g.value(out).numel() == 1 {
        return out;
    }
    let mut r = rng(seed);
    let w = rand_tensor(&mut r, g.shape(out), -1.0, 1.0);
    let w = g.input(w);
    let p = g.mul(out, w).unwrap();
    g.sum_all(p)
}

/// Gradient of `f(inputs)` with respect to each input tensor.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Vec<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let build = |g: &mut Graph<f64>, flat: &[f64], trainable: bool| -> (Vec<Var>, Var) {
        let mut off = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let v = Tensor::new(t.shape(), flat[off..off + t.numel()].to_vec()).unwrap();
                off += t.numel();
                if trainable {
                    g.variable(v)
                } else {
                    g.input(v)
                }
            })
            .collect();
        let out = f(g, &vars);
        let loss = project(g, out, 99);
        (vars, loss)
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let (_, loss) = build(&mut g, p, false);
            g.value(loss).item()
        },
        &flat,
        DEFAULT_EPS,
    )
    .unwrap();
    let mut g = Graph::new();
    let (vars, loss) = build(&mut g, &flat, true);
    let grads = g.backward(loss);
    let mut off = 0;
    let mut out = Vec::new();
    for (i, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let n = t.numel();
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let kinks: Vec<usize> = numeric.nonsmooth.iter().filter(|&&k| k >= off && k < off + n).map(|k| k - off).collect();
        out.push(outcome(format!("{name}[{i}]"), &analytic, &numeric.grad[off..off + n], &kinks));
        off += n;
    }
    out
}

/// Gradient of a scalar loss with respect to the parameters of several stores.
/// `f` gets the stores and whether to bind them trainable.
pub fn check_stores<F>(name: &str, stores: &mut [ParamStore<f64>], f: F) -> Vec<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[ParamStore<f64>], bool) -> Var,
{
    let sizes: Vec<usize> = stores.iter().map(|s| s.num_scalars()).collect();
    let flat: Vec<f64> = stores.iter().flat_map(|s| s.flatten()).collect();
    let mut probes: Vec<ParamStore<f64>> = stores.iter().map(|s| s.duplicate()).collect();
    let numeric = finite_diff_grad(
        |p| {
            let mut off = 0;
            for (probe, &n) in probes.iter_mut().zip(&sizes) {
                probe.set_flat(&p[off..off + n]).unwrap();
                off += n;
            }
            let mut g = Graph::new();
            let loss = f(&mut g, &probes, false);
            g.value(loss).item()
        },
        &flat,
        DEFAULT_EPS,
    )
    .unwrap();
    let mut g = Graph::new();
    let loss = f(&mut g, stores, true);
    let grads = g.backward(loss);
    let mut out = Vec::new();
    let mut base = 0;
    for store in stores.iter_mut() {
        store.zero_grad();
        store.accumulate(&g, &grads);
        let analytic = store.flat_grads();
        let mut off = 0;
        for id in store.ids() {
            let n = store.get(id).numel();
            let lo = base + off;
            let kinks: Vec<usize> = numeric.nonsmooth.iter().filter(|&&k| k >= lo && k < lo + n).map(|k| k - lo).collect();
            out.push(outcome(
                format!("{name}/{}", store.name(id)),
                &analytic[off..off + n],
                &numeric.grad[lo..lo + n],
                &kinks,
            ));
            off += n;
        }
        base += off;
    }
    out
}

fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.2..1.5);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every differentiable graph op and every parameterized layer.
pub fn op_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let t = |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s, -1.0, 1.0);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { t(&mut r, &[4, 3]) } else { t(&mut r, &[3, 4]) };
        let b = if tb { t(&mut r, &[5, 4]) } else { t(&mut r, &[4, 5]) };
        out.extend(check_inputs(&format!("matmul_t({ta},{tb})"), &[a, b], |g, v| g.matmul_t(v[0], v[1], ta, tb).unwrap()));
    }
    let a3 = t(&mut r, &[2, 3, 4]);
    let b3 = t(&mut r, &[2, 4, 5]);
    let b3t = t(&mut r, &[2, 5, 4]);
    out.extend(check_inputs("batch_matmul", &[a3.clone(), b3], |g, v| g.batch_matmul(v[0], v[1], false).unwrap()));
    out.extend(check_inputs("batch_matmul_tb", &[a3, b3t], |g, v| g.batch_matmul(v[0], v[1], true).unwrap()));

    let x = t(&mut r, &[3, 4]);
    let y = t(&mut r, &[3, 4]);
    let row = t(&mut r, &[4]);
    out.extend(check_inputs("add", &[x.clone(), row.clone()], |g, v| g.add(v[0], v[1]).unwrap()));
    out.extend(check_inputs("sub", &[x.clone(), y.clone()], |g, v| g.sub(v[0], v[1]).unwrap()));
    out.extend(check_inputs("mul", &[x.clone(), row.clone()], |g, v| g.mul(v[0], v[1]).unwrap()));
    let shifted = Tensor::from_fn(&[3, 4], |i| x.data()[i] + if i % 2 == 0 { 0.4 } else { -0.4 });
    out.extend(check_inputs("minimum", &[x.clone(), shifted], |g, v| g.minimum(v[0], v[1]).unwrap()));

    let wide = rand_tensor(&mut r, &[3, 5], -2.0, 2.0);
    out.extend(check_inputs("scale", std::slice::from_ref(&wide), |g, v| g.scale(v[0], -1.3)));
    out.extend(check_inputs("add_scalar", std::slice::from_ref(&wide), |g, v| g.add_scalar(v[0], 0.7)));
    out.extend(check_inputs("gelu", std::slice::from_ref(&wide), |g, v| g.gelu(v[0])));
    out.extend(check_inputs("tanh", std::slice::from_ref(&wide), |g, v| g.tanh(v[0])));
    out.extend(check_inputs("exp", std::slice::from_ref(&wide), |g, v| g.exp(v[0])));
    out.extend(check_inputs("square", std::slice::from_ref(&wide), |g, v| g.square(v[0])));
    let pos = rand_tensor(&mut r, &[3, 5], 0.3, 3.0);
    out.extend(check_inputs("log", &[pos], |g, v| g.log(v[0])));
    let k = away_from_zero(&mut r, &[3, 5]);
    out.extend(check_inputs("relu", std::slice::from_ref(&k), |g, v| g.relu(v[0])));
    out.extend(check_inputs("smooth_l1", &[k], |g, v| g.smooth_l1(v[0], 0.5)));

    out.extend(check_inputs("layer_norm", std::slice::from_ref(&wide), |g, v| g.layer_norm(v[0], 1e-5).unwrap()));
    out.extend(check_inputs("softmax", std::slice::from_ref(&wide), |g, v| g.softmax(v[0])));
    out.extend(check_inputs("sum_cols", std::slice::from_ref(&wide), |g, v| g.sum_cols(v[0])));
    out.extend(check_inputs("sum_all", std::slice::from_ref(&wide), |g, v| g.sum_all(v[0])));
    out.extend(check_inputs("mean_all", std::slice::from_ref(&wide), |g, v| g.mean_all(v[0])));
    let tok = t(&mut r, &[6, 4]);
    out.extend(check_inputs("mean_tokens", std::slice::from_ref(&tok), |g, v| g.mean_tokens(v[0], 3).unwrap()));
    let side = t(&mut r, &[3, 2]);
    out.extend(check_inputs("concat_cols", &[x.clone(), side], |g, v| g.concat_cols(v[0], v[1]).unwrap()));
    out.extend(check_inputs("slice_cols", std::slice::from_ref(&x), |g, v| g.slice_cols(v[0], 1, 3).unwrap()));
    out.extend(check_inputs("reshape", std::slice::from_ref(&x), |g, v| g.reshape(v[0], &[2, 6]).unwrap()));
    let other = t(&mut r, &[2, 4]);
    let index = [(0, 2), (1, 0), (0, 2), (1, 1), (0, 0)];
    out.extend(check_inputs("rows", &[x.clone(), other], move |g, v| g.rows(&[v[0], v[1]], &index).unwrap()));
    let qkv = t(&mut r, &[6, 12]);
    for part in 0..3 {
        out.extend(check_inputs(&format!("split_heads[{part}]"), std::slice::from_ref(&qkv), |g, v| {
            g.split_heads(v[0], 2, 3, 2, part, 3).unwrap()
        }));
    }
    let heads = t(&mut r, &[4, 3, 2]);
    out.extend(check_inputs("merge_heads", &[heads], |g, v| g.merge_heads(v[0], 2, 3, 2).unwrap()));
    for stride in [1, 2] {
        let img = t(&mut r, &[2, 2, 7, 7]);
        let w = rand_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut r, &[3], -0.5, 0.5);
        out.extend(check_inputs(&format!("conv2d_s{stride}"), &[img, w, b], |g, v| g.conv2d(v[0], v[1], v[2], stride).unwrap()));
    }
    let logits = rand_tensor(&mut r, &[4, 5], -3.0, 3.0);
    out.extend(check_inputs("softmax_cross_entropy", &[logits], |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 4, 1]).unwrap()));

    let proj = |g: &mut Graph<f64>, o: Var| project(g, o, 5);
    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 4).unwrap();
    jitter(&mut s, &mut r, 0.3);
    let xin = t(&mut r, &[3, 4]);
    out.extend(check_stores("LayerNorm", &mut [s], |g, st, tr| {
        let xv = g.input(xin.clone());
        let o = ln.forward(g, Bind { store: &st[0], trainable: tr }, xv).unwrap();
        proj(g, o)
    }));
    let mut s = ParamStore::new();
    let mlp = Mlp::new(&mut s, "mlp", &[4, 6, 3], Activation::Gelu, Init::FanInUniform, &mut r).unwrap();
    out.extend(check_stores("Mlp", &mut [s], |g, st, tr| {
        let xv = g.input(xin.clone());
        let o = mlp.forward(g, Bind { store: &st[0], trainable: tr }, xv).unwrap();
        proj(g, o)
    }));
    let mut s = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut s, "attn", 4, 2, Init::FanInUniform, &mut r).unwrap();
    out.extend(check_stores("MultiHeadAttention", &mut [s], |g, st, tr| {
        let xv = g.input(tok.clone());
        let o = attn.forward(g, Bind { store: &st[0], trainable: tr }, xv, 2, 3).unwrap();
        proj(g, o)
    }));
    let mut s = ParamStore::new();
    let block = TransformerBlock::new(&mut s, "block", 4, 2, 8, Init::FanInUniform, &mut r).unwrap();
    jitter(&mut s, &mut r, 0.3);
    out.extend(check_stores("TransformerBlock", &mut [s], |g, st, tr| {
        let xv = g.input(tok.clone());
        let o = block.forward(g, Bind { store: &st[0], trainable: tr }, xv, 2, 3).unwrap();
        proj(g, o)
    }));
    out
}

pub fn random_images(r: &mut ChaCha8Rng, batch: usize, channels: usize, size: usize) -> Tensor<f64> {
    rand_tensor(r, &[batch, channels, size, size], 0.0, 1.0)
}

pub fn random_masks(r: &mut ChaCha8Rng, ratio: f64, n: usize, batch: usize) -> Vec<MaskSet> {
    (0..batch).map(|_| sample_mask(ratio, n, r).unwrap()).collect()
}

/// Data2Vec smooth-L1 loss through the encoder and head.
pub fn data2vec_check(seed: u64) -> Vec<CheckOutcome> {
    let mut r = rng(seed);
    let cfg = tiny_vit();
    let mut enc = ParamStore::new();
    let vit = pixrl::encoders::Vit::new(&mut enc, &cfg, &mut r).unwrap();
    jitter(&mut enc, &mut r, 0.1);
    let aux_cfg = tiny_aux(AuxTask::Data2vec);
    let mut aux = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut r).unwrap();
    let mut momentum = aux.momentum_encoder.take().unwrap();
    jitter(&mut momentum, &mut r, 0.2);
    let AuxNet::Data2Vec(head) = aux.net.clone() else { unreachable!() };
    let images = random_images(&mut r, 2, cfg.in_channels, cfg.image_size);
    let masks = random_masks(&mut r, aux_cfg.data2vec_mask_ratio, cfg.num_patches(), 2);
    // a small β puts residuals on both sides of the knee
    let aux_cfg = AuxConfig { data2vec_beta: 0.5, ..aux_cfg };
    check_stores("data2vec", &mut [enc, aux.heads], |g, st, tr| {
        let e = Bind { store: &st[0], trainable: tr };
        let h = Bind { store: &st[1], trainable: tr };
        data2vec_objective(g, &vit, e, &momentum, &head, h, &images, &masks, &aux_cfg).unwrap()
    })
}

/// MAE masked-patch MSE through encoder and decoder.
pub fn mae_check(seed: u64) -> Vec<CheckOutcome> {
    let mut r = rng(seed);
    let cfg = tiny_vit();
    let mut enc = ParamStore::new();
    let vit = pixrl::encoders::Vit::new(&mut enc, &cfg, &mut r).unwrap();
    jitter(&mut enc, &mut r, 0.1);
    let aux_cfg = tiny_aux(AuxTask::Mae);
    let mut aux = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut r).unwrap();
    jitter(&mut aux.heads, &mut r, 0.1);
    let AuxNet::Mae(dec) = aux.net.clone() else { unreachable!() };
    let images = random_images(&mut r, 2, cfg.in_channels, cfg.image_size);
    let masks = random_masks(&mut r, aux_cfg.mae_mask_ratio, cfg.num_patches(), 2);
    check_stores("mae", &mut [enc, aux.heads], |g, st, tr| {
        let e = Bind { store: &st[0], trainable: tr };
        let h = Bind { store: &st[1], trainable: tr };
        mae_objective(g, &vit, e, &dec, h, &images, &masks).unwrap()
    })
}

/// InfoNCE on raw queries/keys/W, and the full contrastive objective.
pub fn infonce_check(seed: u64) -> Vec<CheckOutcome> {
    let mut r = rng(seed);
    let q = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let k = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
    let mut out = check_inputs("info_nce", &[q, k, w], |g, v| info_nce(g, v[0], v[1], v[2]).unwrap());

    let cfg = tiny_vit();
    let mut enc = ParamStore::new();
    let vit = pixrl::encoders::Vit::new(&mut enc, &cfg, &mut r).unwrap();
    jitter(&mut enc, &mut r, 0.1);
    let aux_cfg = tiny_aux(AuxTask::Contrastive);
    let mut aux = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut r).unwrap();
    let mut me = aux.momentum_encoder.take().unwrap();
    let mut mh = aux.momentum_heads.take().unwrap();
    jitter(&mut me, &mut r, 0.1);
    jitter(&mut mh, &mut r, 0.1);
    let AuxNet::Contrastive(head) = aux.net.clone() else { unreachable!() };
    let vq = random_images(&mut r, 3, cfg.in_channels, cfg.image_size);
    let vk = random_images(&mut r, 3, cfg.in_channels, cfg.image_size);
    out.extend(check_stores("contrastive", &mut [enc, aux.heads], |g, st, tr| {
        let e = Bind { store: &st[0], trainable: tr };
        let h = Bind { store: &st[1], trainable: tr };
        contrastive_objective(g, &vit, e, &me, &head, h, &mh, &vq, &vk).unwrap()
    }));
    out
}

/// Critic loss through encoder and critic for both encoder kinds, with the
/// Bellman target held fixed.
pub fn critic_check(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for enc_cfg in [EncoderConfig::Vit(tiny_vit()), EncoderConfig::Cnn(tiny_cnn())] {
        let mut r = rng(seed);
        let mut agent = Agent::<f64>::new(&tiny_sac(2), &enc_cfg, &mut r).unwrap();
        jitter(&mut agent.encoder_store, &mut r, 0.1);
        jitter(&mut agent.critic_store, &mut r, 0.05);
        let images = random_images(&mut r, 2, enc_cfg.in_channels(), enc_cfg.image_size());
        let action = rand_tensor(&mut r, &[2, 2], -1.0, 1.0);
        let y = rand_tensor(&mut r, &[2, 1], -1.0, 1.0);
        let (encoder, critic) = (agent.encoder.clone(), agent.critic.clone());
        let name = format!("critic_loss[{:?}]", enc_cfg.kind());
        let mut stores = [std::mem::take(&mut agent.encoder_store), std::mem::take(&mut agent.critic_store)];
        out.extend(check_stores(&name, &mut stores, |g, st, tr| {
            let z = encoder.encode(g, Bind { store: &st[0], trainable: tr }, &images).unwrap();
            critic_loss(g, &critic, Bind { store: &st[1], trainable: tr }, z, &action, &y).unwrap()
        }));
    }
    out
}

/// Actor loss with fixed noise and α, and the temperature loss.
pub fn actor_alpha_check(seed: u64) -> Vec<CheckOutcome> {
    let mut r = rng(seed);
    let mut agent = Agent::<f64>::new(&tiny_sac(2), &EncoderConfig::Vit(tiny_vit()), &mut r).unwrap();
    jitter(&mut agent.critic_store, &mut r, 0.05);
    let latent = rand_tensor(&mut r, &[2, 8], -1.0, 1.0);
    let noise = standard_normal::<f64, _>(&[2, 2], &mut r);
    let (critic, actor, critic_store) = (agent.critic.clone(), agent.actor.clone(), agent.critic_store.duplicate());
    let mut out = check_stores("actor_loss", &mut [std::mem::take(&mut agent.actor_store)], |g, st, tr| {
        let z = g.input(latent.clone());
        actor_loss(g, &critic, &critic_store, &actor, Bind { store: &st[0], trainable: tr }, z, &noise, 0.3).unwrap().loss
    });
    let log_prob = rand_tensor(&mut r, &[5, 1], -3.0, 1.0);
    let la = agent.log_alpha;
    out.extend(check_stores("alpha_loss", &mut [std::mem::take(&mut agent.alpha_store)], |g, st, tr| {
        let v = Bind { store: &st[0], trainable: tr }.var(g, la);
        alpha_loss(g, v, &log_prob, -2.0).unwrap()
    }));
    out
}

pub fn loss_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut out = data2vec_check(seed);
    out.extend(mae_check(seed));
    out.extend(infonce_check(seed));
    out.extend(critic_check(seed));
    out.extend(actor_alpha_check(seed));
    out
}

/// Ops and losses over three random instances each.
pub fn grad_suite() -> Vec<CheckOutcome> {
    (0..3).flat_map(|s| op_checks(100 + s).into_iter().chain(loss_checks(200 + s))).collect()
}

pub fn assert_all_pass(outcomes: &[CheckOutcome]) {
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.to_string()).collect();
    assert!(failed.is_empty(), "gradient checks failed:\n{}", failed.join("\n"));
}

/// Upper 0.1% point of the chi-square distribution (Wilson–Hilferty).
pub fn chi_square_critical(df: usize) -> f64 {
    let k = df as f64;
    let z = 3.090_232;
    k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
}

/// Pearson statistic against equal expected counts.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Small but complete training run on the real environment and image size.
pub fn tiny_train(aux: &str) -> pixrl::config::TrainConfig {
    let encoder = if aux == "cnn" { "cnn" } else { "vit" };
    let aux = if aux == "cnn" { "none" } else { aux };
    pixrl::config::TrainConfig::from_json(&format!(
        r#"{{
            "encoder": "{encoder}", "aux_task": "{aux}",
            "total_steps": 20, "initial_steps": 16, "batch_size": 4, "contrastive_batch_size": 4,
            "replay_capacity": 500, "hidden_units": 16, "latent_dim": 16, "vit_depth": 2,
            "vit_mlp_dim": 16, "vit_heads": 2, "mae_decoder_dim": 8, "mae_decoder_depth": 1,
            "mae_decoder_heads": 2, "cnn_channels": 4, "eval_episodes": 2, "eval_frequency": 10,
            "record_wall_time": false
        }}"#
    ))
    .unwrap()
}
