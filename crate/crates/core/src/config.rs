//! Flat JSON training configuration. Every hyperparameter has a default, so
//! `{}` is a complete config; unknown keys are rejected.

use std::path::Path;

use pixrl_envsim::{EnvSpec, Task};
use serde::{Deserialize, Serialize};

use crate::auxtasks::{AuxConfig, AuxTask};
use crate::encoders::{CnnConfig, EncoderConfig, EncoderKind, VitConfig};
use crate::replay::STACK;
use crate::sac::SacConfig;
use crate::{augment, CoreError, Result};


macro_rules! default_fns {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

default_fns! {
    default_env: String = "cartpole_swingup".into();
    default_encoder: EncoderKind = EncoderKind::Vit;
    default_aux: AuxTask = AuxTask::None;
    default_total_steps: u64 = 100_000;
    default_initial_steps: u64 = 1000;
    default_replay_capacity: usize = 100_000;
    default_batch_size: usize = 512;
    default_contrastive_batch_size: usize = 128;
    default_hidden_units: usize = 1024;
    default_eval_episodes: usize = 10;
    default_eval_frequency: u64 = 10_000;
    default_lr: f64 = 1e-3;
    default_alpha_lr: f64 = 1e-4;
    default_alpha_beta1: f64 = 0.9;
    default_encoder_ema: f64 = 0.05;
    default_critic_ema: f64 = 0.01;
    default_discount: f64 = 0.99;
    default_initial_alpha: f64 = 0.1;
    default_latent_dim: usize = 128;
    default_critic_update_frequency: u64 = 2;
    default_patch_size: usize = 12;
    default_vit_depth: usize = 4;
    default_vit_mlp_dim: usize = 128;
    default_vit_heads: usize = 8;
    default_data2vec_k: usize = 2;
    default_data2vec_beta: f64 = 2.0;
    default_data2vec_mask_ratio: f64 = 0.4;
    default_mae_mask_ratio: f64 = 0.75;
    default_mae_decoder_dim: usize = 64;
    default_mae_decoder_depth: usize = 2;
    default_mae_decoder_heads: usize = 4;
    default_cnn_channels: usize = 32;
    default_cnn_strides: Vec<usize> = vec![2, 2, 1, 1];
    default_true: bool = true;
}

/// Training configuration. Step counts are agent steps, i.e. after action
/// repeat; one agent step executes `action_repeat` physics steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_env")]
    pub env: String,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderKind,
    #[serde(default = "default_aux")]
    pub aux_task: AuxTask,
    #[serde(default)]
    pub seed: u64,
    /// Agent steps after the initial random phase.
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_initial_steps")]
    pub initial_steps: u64,
    /// Defaults to the task's own repeat when absent.
    #[serde(default)]
    pub action_repeat: Option<u32>,
    #[serde(default = "default_replay_capacity")]
    pub replay_capacity: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_contrastive_batch_size")]
    pub contrastive_batch_size: usize,
    #[serde(default = "default_hidden_units")]
    pub hidden_units: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_eval_frequency")]
    pub eval_frequency: u64,
    #[serde(default = "default_lr")]
    pub encoder_lr: f64,
    #[serde(default = "default_lr")]
    pub actor_lr: f64,
    #[serde(default = "default_lr")]
    pub critic_lr: f64,
    #[serde(default = "default_alpha_lr")]
    pub alpha_lr: f64,
    #[serde(default = "default_alpha_beta1")]
    pub alpha_beta1: f64,
    #[serde(default = "default_encoder_ema")]
    pub encoder_ema: f64,
    #[serde(default = "default_critic_ema")]
    pub critic_ema: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_initial_alpha")]
    pub initial_alpha: f64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Critic updates per actor/temperature/target update.
    #[serde(default = "default_critic_update_frequency")]
    pub critic_update_frequency: u64,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_vit_depth")]
    pub vit_depth: usize,
    #[serde(default = "default_vit_mlp_dim")]
    pub vit_mlp_dim: usize,
    #[serde(default = "default_vit_heads")]
    pub vit_heads: usize,
    #[serde(default = "default_data2vec_k")]
    pub data2vec_k: usize,
    #[serde(default = "default_data2vec_beta")]
    pub data2vec_beta: f64,
    #[serde(default)]
    pub data2vec_target_from_zero: bool,
    #[serde(default = "default_data2vec_mask_ratio")]
    pub data2vec_mask_ratio: f64,
    #[serde(default = "default_mae_mask_ratio")]
    pub mae_mask_ratio: f64,
    #[serde(default = "default_mae_decoder_dim")]
    pub mae_decoder_dim: usize,
    #[serde(default = "default_mae_decoder_depth")]
    pub mae_decoder_depth: usize,
    #[serde(default = "default_mae_decoder_heads")]
    pub mae_decoder_heads: usize,
    #[serde(default = "default_cnn_channels")]
    pub cnn_channels: usize,
    #[serde(default = "default_cnn_strides")]
    pub cnn_strides: Vec<usize>,
    /// Writes 0 into the wall-time column when false, making metrics files
    /// byte-comparable across runs.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
    /// Agent steps between checkpoints; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_frequency: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        self.env_spec()?;
        if self.encoder == EncoderKind::Cnn && self.aux_task != AuxTask::None {
            return bad(format!("the CNN encoder only supports aux_task none, got {}", self.aux_task));
        }
        if self.batch_size == 0 || self.contrastive_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.eval_frequency == 0 {
            return bad("eval_frequency must be positive".into());
        }
        if self.critic_update_frequency == 0 {
            return bad("critic_update_frequency must be positive".into());
        }
        if self.replay_capacity < 2 {
            return bad("replay_capacity must be at least 2".into());
        }
        for (name, r) in [("data2vec_mask_ratio", self.data2vec_mask_ratio), ("mae_mask_ratio", self.mae_mask_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        for (name, r) in [("encoder_ema", self.encoder_ema), ("critic_ema", self.critic_ema)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.initial_alpha <= 0.0 {
            return bad("initial_alpha must be positive".into());
        }
        match self.encoder_config() {
            EncoderConfig::Vit(v) => v.validate()?,
            EncoderConfig::Cnn(c) => {
                c.flat_dim()?;
            }
        }
        if self.aux_task == AuxTask::Data2vec && self.aux_config().data2vec_terms() > self.vit_depth {
            return bad("Data2Vec target sums more block outputs than the ViT has".into());
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        Ok(self.env.parse::<Task>()?)
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        let spec = EnvSpec::by_name(&self.env)?;
        Ok(match self.action_repeat {
            Some(r) => spec.with_action_repeat(r)?,
            None => spec,
        })
    }

    pub fn channels(&self) -> usize {
        3 * STACK
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        match self.encoder {
            EncoderKind::Vit => EncoderConfig::Vit(VitConfig {
                image_size: augment::CROP_SIZE,
                in_channels: self.channels(),
                patch_size: self.patch_size,
                embed_dim: self.latent_dim,
                depth: self.vit_depth,
                heads: self.vit_heads,
                mlp_dim: self.vit_mlp_dim,
            }),
            EncoderKind::Cnn => EncoderConfig::Cnn(CnnConfig {
                image_size: augment::CROP_SIZE,
                in_channels: self.channels(),
                channels: self.cnn_channels,
                kernel: 3,
                strides: self.cnn_strides.clone(),
                latent_dim: self.latent_dim,
            }),
        }
    }

    pub fn sac_config(&self, action_dim: usize) -> SacConfig {
        SacConfig {
            hidden: self.hidden_units,
            discount: self.discount,
            encoder_lr: self.encoder_lr,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            alpha_lr: self.alpha_lr,
            alpha_beta1: self.alpha_beta1,
            initial_alpha: self.initial_alpha,
            critic_target_follow_rate: self.critic_ema,
            actor_update_every: self.critic_update_frequency,
            ..SacConfig::new(action_dim)
        }
    }

    pub fn aux_config(&self) -> AuxConfig {
        AuxConfig {
            task: self.aux_task,
            lr: self.encoder_lr,
            momentum_follow_rate: self.encoder_ema,
            data2vec_mask_ratio: self.data2vec_mask_ratio,
            data2vec_top_k: self.data2vec_k,
            data2vec_beta: self.data2vec_beta,
            data2vec_target_from_zero: self.data2vec_target_from_zero,
            mae_mask_ratio: self.mae_mask_ratio,
            mae_decoder_dim: self.mae_decoder_dim,
            mae_decoder_depth: self.mae_decoder_depth,
            mae_decoder_heads: self.mae_decoder_heads,
        }
    }

    /// Metrics file stem: `{env}_{encoder}_{aux}_seed{N}`.
    pub fn run_name(&self) -> String {
        let enc = match self.encoder {
            EncoderKind::Vit => "vit",
            EncoderKind::Cnn => "cnn",
        };
        format!("{}_{}_{}_seed{}", self.env, enc, self.aux_task, self.seed)
    }

    /// True when two configs describe the same experiment; the run length
    /// and wall-time recording may differ.
    pub fn compatible_with(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig { total_steps: 0, record_wall_time: true, checkpoint_frequency: 0, ..c.clone() };
        strip(self) == strip(other)
    }
}
