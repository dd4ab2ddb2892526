//! Soft actor-critic over the encoder latent. The critic trains the encoder;
//! the actor only ever sees a detached latent.

use pixrl_nn::layers::{Activation, Bind, Init, LayerNorm, Linear, Mlp};
use pixrl_nn::{ema_update, AdamConfig, Container, Entry, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoders::{Encoder, EncoderConfig};
use crate::{CoreError, Result};

pub const LOG_PROB_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SacConfig {
    pub action_dim: usize,
    pub hidden: usize,
    pub discount: f64,
    pub encoder_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub initial_alpha: f64,
    pub critic_target_follow_rate: f64,
    /// Actor, temperature and target updates happen on every n-th critic update.
    pub actor_update_every: u64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl SacConfig {
    pub fn new(action_dim: usize) -> Self {
        Self {
            action_dim,
            hidden: 1024,
            discount: 0.99,
            encoder_lr: 1e-3,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            alpha_lr: 1e-4,
            alpha_beta1: 0.9,
            initial_alpha: 0.1,
            critic_target_follow_rate: 0.01,
            actor_update_every: 2,
            log_std_min: -10.0,
            log_std_max: 2.0,
        }
    }

    pub fn target_entropy(&self) -> f64 {
        -(self.action_dim as f64)
    }
}

/// Squashed-Gaussian policy head.
#[derive(Clone, Debug)]
pub struct Actor {
    pub mlp: Mlp,
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PolicySample {
    /// `[B, A]`, inside `(−1, 1)`.
    pub action: Var,
    /// `[B, 1]`.
    pub log_prob: Var,
}

impl Actor {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, latent: usize, cfg: &SacConfig, rng: &mut R) -> Result<Self> {
        let dims = [latent, cfg.hidden, cfg.hidden, 2 * cfg.action_dim];
        Ok(Self {
            mlp: Mlp::new(store, "actor", &dims, Activation::Relu, Init::FanInUniform, rng)?,
            action_dim: cfg.action_dim,
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
        })
    }

    /// Mean and log-std, the latter squashed into `[log_std_min, log_std_max]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: Var) -> Result<(Var, Var)> {
        let a = self.action_dim;
        let out = self.mlp.forward(g, p, feat)?;
        let mean = g.slice_cols(out, 0, a)?;
        let raw = g.slice_cols(out, a, 2 * a)?;
        let t = g.tanh(raw);
        let half_span = 0.5 * (self.log_std_max - self.log_std_min);
        let t = g.add_scalar(t, T::one());
        let t = g.scale(t, T::lit(half_span));
        let log_std = g.add_scalar(t, T::lit(self.log_std_min));
        Ok((mean, log_std))
    }

    /// Reparameterized sample `tanh(μ + σ·ε)` with the change-of-variables
    /// correction `−Σ log(1 − a² + 1e-6)`.
    pub fn sample<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: Var, noise: &Tensor<T>) -> Result<PolicySample> {
        let (mean, log_std) = self.forward(g, p, feat)?;
        if g.shape(mean) != noise.shape() {
            return Err(CoreError::Shape(format!("noise {:?} for actions {:?}", noise.shape(), g.shape(mean))));
        }
        let eps = g.input(noise.clone());
        let std = g.exp(log_std);
        let spread = g.mul(std, eps)?;
        let u = g.add(mean, spread)?;
        let action = g.tanh(u);

        // Gaussian part: −½ε² − log σ − ½ log 2π, summed over dimensions
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let quad = noise.map(|e| T::lit(-0.5) * e * e - T::lit(half_log_2pi));
        let quad = g.input(quad);
        let gauss = g.sub(quad, log_std)?;
        let gauss = g.sum_cols(gauss);

        let sq = g.square(action);
        let sq = g.scale(sq, -T::one());
        let inner = g.add_scalar(sq, T::lit(1.0 + LOG_PROB_EPS));
        let log_det = g.log(inner);
        let log_det = g.sum_cols(log_det);
        let log_prob = g.sub(gauss, log_det)?;
        Ok(PolicySample { action, log_prob })
    }
}

/// Neck (linear + layer norm) followed by two independent Q heads.
#[derive(Clone, Debug)]
pub struct Critic {
    pub neck: Linear,
    pub neck_ln: LayerNorm,
    pub q1: Mlp,
    pub q2: Mlp,
}

impl Critic {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, latent: usize, cfg: &SacConfig, rng: &mut R) -> Result<Self> {
        let dims = [latent + cfg.action_dim, cfg.hidden, cfg.hidden, 1];
        Ok(Self {
            neck: Linear::new(store, "critic.neck", latent, latent, Init::FanInUniform, rng)?,
            neck_ln: LayerNorm::new(store, "critic.neck_ln", latent)?,
            q1: Mlp::new(store, "critic.q1", &dims, Activation::Relu, Init::FanInUniform, rng)?,
            q2: Mlp::new(store, "critic.q2", &dims, Activation::Relu, Init::FanInUniform, rng)?,
        })
    }

    pub fn features<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, z: Var) -> Result<Var> {
        let h = self.neck.forward(g, p, z)?;
        Ok(self.neck_ln.forward(g, p, h)?)
    }

    pub fn q<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, feat: Var, action: Var) -> Result<(Var, Var)> {
        let x = g.concat_cols(feat, action)?;
        Ok((self.q1.forward(g, p, x)?, self.q2.forward(g, p, x)?))
    }
}

/// Per-sample tensors for one SAC update.
#[derive(Clone, Debug)]
pub struct SacBatch<T> {
    /// `[B, C, S, S]` in `[0, 1]`.
    pub obs: Tensor<T>,
    pub next_obs: Tensor<T>,
    /// `[B, A]`.
    pub action: Tensor<T>,
    /// `[B, 1]`.
    pub reward: Tensor<T>,
    pub not_done: Tensor<T>,
}

impl<T: Real> SacBatch<T> {
    pub fn len(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub alpha: f64,
    /// Encoder gradient norm produced by the critic loss.
    pub encoder_grad_norm: f64,
    /// Encoder gradient norm produced by the actor loss; always zero.
    pub actor_encoder_grad_norm: Option<f64>,
}

/// Result of a critic step, carrying the latent the actor step reuses.
#[derive(Clone, Debug)]
pub struct CriticStep<T> {
    pub loss: f64,
    pub encoder_grad_norm: f64,
    /// Encoder output on `obs`, as a plain tensor.
    pub latent: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorStep {
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub encoder_grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Train,
    Eval,
}

/// Everything the SAC agent owns: encoder, critic with its EMA target,
/// actor and temperature, each in its own parameter store.
#[derive(Debug)]
pub struct Agent<T> {
    pub cfg: SacConfig,
    pub encoder: Encoder,
    pub encoder_store: ParamStore<T>,
    pub critic: Critic,
    pub critic_store: ParamStore<T>,
    pub critic_target: ParamStore<T>,
    pub actor: Actor,
    pub actor_store: ParamStore<T>,
    pub log_alpha: ParamId,
    pub alpha_store: ParamStore<T>,
    pub critic_updates: u64,
    pub actor_updates: u64,
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// `[B, 1]` Bellman targets `r + γ·not_done·(min Q'(s', a') − α log π(a'|s'))`,
/// computed on a private graph so nothing can leak gradient into them.
#[allow(clippy::too_many_arguments)]
pub fn bellman_target<T: Real>(
    critic: &Critic,
    critic_target: &ParamStore<T>,
    critic_online: &ParamStore<T>,
    actor: &Actor,
    actor_store: &ParamStore<T>,
    next_latent: &Tensor<T>,
    reward: &Tensor<T>,
    not_done: &Tensor<T>,
    noise: &Tensor<T>,
    alpha: f64,
    discount: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let z = g.input(next_latent.clone());
    let feat = critic.features(&mut g, Bind::frozen(critic_online), z)?;
    let pi = actor.sample(&mut g, Bind::frozen(actor_store), feat, noise)?;
    let tfeat = critic.features(&mut g, Bind::frozen(critic_target), z)?;
    let (q1, q2) = critic.q(&mut g, Bind::frozen(critic_target), tfeat, pi.action)?;
    let qmin = g.minimum(q1, q2)?;
    let (qv, lp) = (g.value(qmin), g.value(pi.log_prob));
    if qv.numel() != reward.numel() || reward.numel() != not_done.numel() {
        return Err(CoreError::Shape("reward, not_done and batch disagree".into()));
    }
    let (a, gamma) = (T::lit(alpha), T::lit(discount));
    let data = (0..qv.numel())
        .map(|i| reward.data()[i] + gamma * not_done.data()[i] * (qv.data()[i] - a * lp.data()[i]))
        .collect();
    Ok(Tensor::new(&[qv.numel(), 1], data)?)
}

/// `½·(mean (Q₁ − y)² + mean (Q₂ − y)²)` from a latent that may carry gradient.
pub fn critic_loss<T: Real>(
    g: &mut Graph<T>,
    critic: &Critic,
    critic_bind: Bind<'_, T>,
    latent: Var,
    action: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Var> {
    let feat = critic.features(g, critic_bind, latent)?;
    let a = g.input(action.clone());
    let (q1, q2) = critic.q(g, critic_bind, feat, a)?;
    let y = g.input(target.clone());
    let mut terms = Vec::with_capacity(2);
    for q in [q1, q2] {
        let d = g.sub(q, y)?;
        let sq = g.square(d);
        terms.push(g.mean_all(sq));
    }
    let sum = g.add(terms[0], terms[1])?;
    Ok(g.scale(sum, T::lit(0.5)))
}

#[derive(Clone, Copy, Debug)]
pub struct ActorLoss {
    pub loss: Var,
    pub log_prob: Var,
}

/// `mean(α·log π(a|s) − min Q(s, a))` with the critic frozen. `latent` should
/// already be detached from the encoder.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<T: Real>(
    g: &mut Graph<T>,
    critic: &Critic,
    critic_store: &ParamStore<T>,
    actor: &Actor,
    actor_bind: Bind<'_, T>,
    latent: Var,
    noise: &Tensor<T>,
    alpha: f64,
) -> Result<ActorLoss> {
    let frozen = Bind::frozen(critic_store);
    let feat = critic.features(g, frozen, latent)?;
    let pi = actor.sample(g, actor_bind, feat, noise)?;
    let (q1, q2) = critic.q(g, frozen, feat, pi.action)?;
    let qmin = g.minimum(q1, q2)?;
    let weighted = g.scale(pi.log_prob, T::lit(alpha));
    let d = g.sub(weighted, qmin)?;
    Ok(ActorLoss { loss: g.mean_all(d), log_prob: pi.log_prob })
}

/// `mean(−α·(log π + target_entropy))` as a function of `log α` only.
pub fn alpha_loss<T: Real>(g: &mut Graph<T>, log_alpha: Var, log_prob: &Tensor<T>, target_entropy: f64) -> Result<Var> {
    let alpha = g.exp(log_alpha);
    let shifted = log_prob.map(|v| -(v + T::lit(target_entropy)));
    let s = g.input(shifted);
    let prod = g.mul(s, alpha)?;
    Ok(g.mean_all(prod))
}

impl<T: Real> Agent<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &SacConfig, encoder_cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut encoder_store = ParamStore::new();
        let encoder = Encoder::new(&mut encoder_store, encoder_cfg, rng)?;
        let latent = encoder.latent_dim();
        let mut critic_store = ParamStore::new();
        let critic = Critic::new(&mut critic_store, latent, cfg, rng)?;
        let critic_target = critic_store.duplicate();
        let mut actor_store = ParamStore::new();
        let actor = Actor::new(&mut actor_store, latent, cfg, rng)?;
        let mut alpha_store = ParamStore::new();
        let log_alpha = alpha_store.add("log_alpha", Tensor::full(&[1], T::lit(cfg.initial_alpha.ln())))?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            encoder_store,
            critic,
            critic_store,
            critic_target,
            actor,
            actor_store,
            log_alpha,
            alpha_store,
            critic_updates: 0,
            actor_updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_store.get(self.log_alpha).item().as_f64().exp()
    }

    /// Policy action for `[1, C, S, S]` (or batched) images.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Tensor<T>, mode: ActMode, rng: &mut R) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let z = self.encoder.encode(&mut g, Bind::frozen(&self.encoder_store), obs)?;
        let feat = self.critic.features(&mut g, Bind::frozen(&self.critic_store), z)?;
        let (mean, log_std) = self.actor.forward(&mut g, Bind::frozen(&self.actor_store), feat)?;
        let mean = g.value(mean);
        let out = match mode {
            ActMode::Eval => mean.data().iter().map(|m| m.as_f64().tanh() as f32).collect(),
            ActMode::Train => mean
                .data()
                .iter()
                .zip(g.value(log_std).data())
                .map(|(m, s)| {
                    let e: f64 = rng.sample(StandardNormal);
                    (m.as_f64() + s.as_f64().exp() * e).tanh() as f32
                })
                .collect(),
        };
        Ok(out)
    }

    /// Critic (plus encoder) step, then actor, temperature and target-critic
    /// steps on the configured schedule.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &SacBatch<T>, rng: &mut R) -> Result<UpdateStats> {
        let alpha = self.alpha();
        let critic = self.critic_update(batch, rng)?;
        let mut stats = UpdateStats {
            critic_loss: critic.loss,
            alpha,
            encoder_grad_norm: critic.encoder_grad_norm,
            ..Default::default()
        };
        if self.critic_updates.is_multiple_of(self.cfg.actor_update_every.max(1)) {
            let actor = self.actor_and_alpha_update(&critic.latent, rng)?;
            stats.actor_loss = Some(actor.actor_loss);
            stats.alpha_loss = Some(actor.alpha_loss);
            stats.actor_encoder_grad_norm = Some(actor.encoder_grad_norm);
            stats.alpha = self.alpha();
        }
        Ok(stats)
    }

    /// Squared Bellman error step on the critic and the encoder.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &SacBatch<T>, rng: &mut R) -> Result<CriticStep<T>> {
        let b = batch.len();
        let a = self.cfg.action_dim;
        let alpha = self.alpha();

        let next_latent = {
            let mut g = Graph::new();
            let z = self.encoder.encode(&mut g, Bind::frozen(&self.encoder_store), &batch.next_obs)?;
            g.value(z).clone()
        };
        let next_noise = standard_normal::<T, _>(&[b, a], rng);
        let target = bellman_target(
            &self.critic,
            &self.critic_target,
            &self.critic_store,
            &self.actor,
            &self.actor_store,
            &next_latent,
            &batch.reward,
            &batch.not_done,
            &next_noise,
            alpha,
            self.cfg.discount,
        )?;

        let (loss, latent) = {
            let mut g = Graph::new();
            let z = self.encoder.encode(&mut g, Bind::trainable(&self.encoder_store), &batch.obs)?;
            let loss = critic_loss(&mut g, &self.critic, Bind::trainable(&self.critic_store), z, &batch.action, &target)?;
            let grads = g.backward(loss);
            self.encoder_store.zero_grad();
            self.critic_store.zero_grad();
            self.encoder_store.accumulate(&g, &grads);
            self.critic_store.accumulate(&g, &grads);
            (g.value(loss).item().as_f64(), g.value(z).clone())
        };
        let encoder_grad_norm = self.encoder_store.grad_norm();
        self.critic_store.adam_step(&AdamConfig::with_lr(self.cfg.critic_lr));
        self.encoder_store.adam_step(&AdamConfig::with_lr(self.cfg.encoder_lr));
        self.critic_updates += 1;
        Ok(CriticStep { loss, encoder_grad_norm, latent })
    }

    /// Actor and temperature steps on a detached latent, then the target-critic
    /// EMA. The encoder is not part of the actor graph.
    pub fn actor_and_alpha_update<R: Rng + ?Sized>(&mut self, latent: &Tensor<T>, rng: &mut R) -> Result<ActorStep> {
        let alpha = self.alpha();
        let noise = standard_normal::<T, _>(&[latent.rows(), self.cfg.action_dim], rng);
        let (actor_loss_value, log_prob, encoder_grad_norm) = {
            let mut g = Graph::new();
            let z = g.input(latent.clone());
            let out = actor_loss(&mut g, &self.critic, &self.critic_store, &self.actor, Bind::trainable(&self.actor_store), z, &noise, alpha)?;
            let grads = g.backward(out.loss);
            self.actor_store.zero_grad();
            self.actor_store.accumulate(&g, &grads);
            self.encoder_store.zero_grad();
            self.encoder_store.accumulate(&g, &grads);
            let norm = self.encoder_store.grad_norm();
            (g.value(out.loss).item().as_f64(), g.value(out.log_prob).clone(), norm)
        };
        self.actor_store.adam_step(&AdamConfig::with_lr(self.cfg.actor_lr));

        let alpha_loss_value = {
            let mut g = Graph::new();
            let la = g.param(&self.alpha_store, self.log_alpha);
            let loss = alpha_loss(&mut g, la, &log_prob, self.cfg.target_entropy())?;
            let grads = g.backward(loss);
            self.alpha_store.zero_grad();
            self.alpha_store.accumulate(&g, &grads);
            g.value(loss).item().as_f64()
        };
        let cfg = AdamConfig { lr: self.cfg.alpha_lr, beta1: self.cfg.alpha_beta1, ..AdamConfig::default() };
        self.alpha_store.adam_step(&cfg);
        ema_update(&mut self.critic_target, &self.critic_store, self.cfg.critic_target_follow_rate)?;
        self.actor_updates += 1;
        Ok(ActorStep { actor_loss: actor_loss_value, alpha_loss: alpha_loss_value, encoder_grad_norm })
    }

    pub fn export(&self, c: &mut Container) {
        self.encoder_store.export("agent.encoder", c);
        self.critic_store.export("agent.critic", c);
        self.critic_target.export("agent.critic_target", c);
        self.actor_store.export("agent.actor", c);
        self.alpha_store.export("agent.alpha", c);
        c.insert("agent.counters", Entry::U64(vec![self.critic_updates, self.actor_updates]));
    }

    pub fn import(&mut self, c: &Container) -> Result<()> {
        self.encoder_store.import("agent.encoder", c)?;
        self.critic_store.import("agent.critic", c)?;
        self.critic_target.import("agent.critic_target", c)?;
        self.actor_store.import("agent.actor", c)?;
        self.alpha_store.import("agent.alpha", c)?;
        let &[critic, actor] = c.u64s("agent.counters")? else {
            return Err(CoreError::Checkpoint("agent counters malformed".into()));
        };
        self.critic_updates = critic;
        self.actor_updates = actor;
        Ok(())
    }
}
