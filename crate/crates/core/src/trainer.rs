//! Training loop, evaluation, metrics and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pixrl_envsim::{Env, EnvSpec, PixelObservation, FRAME_STACK};
use pixrl_nn::{Container, Entry, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, CENTER_OFFSET, CROP_SIZE};
use crate::auxtasks::{contrastive_pair, AuxInput, AuxModule, AuxTask};
use crate::config::TrainConfig;
use crate::encoders::images_from_u8;
use crate::replay::{ReplayBuffer, Transition};
use crate::sac::{ActMode, Agent, SacBatch};
use crate::{CoreError, Result};

pub const METRICS_HEADER: &str = "agent_step,mean_return,std_return,rl_critic_loss,rl_actor_loss,aux_loss,alpha,wall_seconds";

const EVAL_SEED_OFFSET: u64 = 1 << 40;

/// One evaluation point. Loss columns are means over the updates since the
/// previous row, NaN when there were none.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub agent_step: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub rl_critic_loss: f64,
    pub rl_actor_loss: f64,
    pub aux_loss: f64,
    pub alpha: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    const FIELDS: usize = 8;

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.agent_step,
            self.mean_return,
            self.std_return,
            self.rl_critic_loss,
            self.rl_actor_loss,
            self.aux_loss,
            self.alpha,
            self.wall_seconds
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != Self::FIELDS {
            return Err(CoreError::Plot(format!("expected {} columns, got {}", Self::FIELDS, parts.len())));
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|e| CoreError::Plot(format!("column {i}: {e}")));
        Ok(Self {
            agent_step: parts[0].parse().map_err(|e| CoreError::Plot(format!("agent_step: {e}")))?,
            mean_return: f(1)?,
            std_return: f(2)?,
            rl_critic_loss: f(3)?,
            rl_actor_loss: f(4)?,
            aux_loss: f(5)?,
            alpha: f(6)?,
            wall_seconds: f(7)?,
        })
    }

    fn to_f64s(&self) -> [f64; Self::FIELDS] {
        [
            self.agent_step as f64,
            self.mean_return,
            self.std_return,
            self.rl_critic_loss,
            self.rl_actor_loss,
            self.aux_loss,
            self.alpha,
            self.wall_seconds,
        ]
    }

    fn from_f64s(v: &[f64]) -> Self {
        Self {
            agent_step: v[0] as u64,
            mean_return: v[1],
            std_return: v[2],
            rl_critic_loss: v[3],
            rl_actor_loss: v[4],
            aux_loss: v[5],
            alpha: v[6],
            wall_seconds: v[7],
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv()).expect("writing to a String");
    }
    out
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(CoreError::Plot(format!("{} lacks the metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::from_csv).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn eval_seed(run_seed: u64, episode: usize) -> u64 {
    EVAL_SEED_OFFSET + run_seed.wrapping_mul(10_000) + episode as u64
}

fn center_images<T: Real>(stacks: &[Vec<u8>], channels: usize) -> Result<Tensor<T>> {
    let mut buf = Vec::with_capacity(stacks.len() * channels * CROP_SIZE * CROP_SIZE);
    for s in stacks {
        augment::crop_into(s, channels, CENTER_OFFSET, &mut buf)?;
    }
    images_from_u8(&buf, stacks.len(), channels, CROP_SIZE)
}

/// Runs `episodes` full episodes with deterministic actions on center crops.
/// Episodes advance in lockstep so the policy sees them as one batch. Touches
/// neither the agent nor any training state.
pub fn evaluate<T: Real>(agent: &Agent<T>, spec: &EnvSpec, episodes: usize, run_seed: u64) -> Result<EvalResult> {
    let channels = 3 * FRAME_STACK;
    let mut envs: Vec<Env> = (0..episodes).map(|_| Env::new(*spec)).collect();
    let mut obs: Vec<PixelObservation> = envs.iter_mut().enumerate().map(|(e, env)| env.reset(eval_seed(run_seed, e))).collect();
    let mut returns = vec![0.0; episodes];
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let a = spec.action_dim;
    loop {
        let active: Vec<usize> = (0..episodes).filter(|&e| !envs[e].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let stacks: Vec<Vec<u8>> = active.iter().map(|&e| obs[e].stacked()).collect();
        let images = center_images::<T>(&stacks, channels)?;
        let actions = agent.act(&images, ActMode::Eval, &mut unused)?;
        for (k, &e) in active.iter().enumerate() {
            let r = envs[e].step(&actions[k * a..(k + 1) * a])?;
            returns[e] += r.reward;
            obs[e] = r.observation;
        }
    }
    let n = episodes.max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalResult { returns, mean, std })
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Accum {
    critic: (f64, f64),
    actor: (f64, f64),
    aux: (f64, f64),
}

impl Accum {
    fn mean((sum, n): (f64, f64)) -> f64 {
        if n > 0.0 {
            sum / n
        } else {
            f64::NAN
        }
    }

    fn to_f64s(&self) -> Vec<f64> {
        vec![self.critic.0, self.critic.1, self.actor.0, self.actor.1, self.aux.0, self.aux.1]
    }

    fn from_f64s(v: &[f64]) -> Self {
        Self { critic: (v[0], v[1]), actor: (v[2], v[3]), aux: (v[4], v[5]) }
    }
}

fn rng_state(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut out: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = rng.get_word_pos();
    out.push(rng.get_stream());
    out.push(pos as u64);
    out.push((pos >> 64) as u64);
    out
}

fn rng_from_state(v: &[u64]) -> Result<ChaCha8Rng> {
    if v.len() != 7 {
        return Err(CoreError::Checkpoint("rng state has the wrong length".into()));
    }
    let mut seed = [0u8; 32];
    for (c, x) in seed.chunks_exact_mut(8).zip(&v[..4]) {
        c.copy_from_slice(&x.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(v[4]);
    rng.set_word_pos(v[5] as u128 | ((v[6] as u128) << 64));
    Ok(rng)
}

/// Counts of each kind of update since the start of the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub critic: u64,
    pub actor: u64,
    pub aux: u64,
}

/// All state of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub spec: EnvSpec,
    pub agent: Agent<f32>,
    pub aux: AuxModule<f32>,
    pub replay: ReplayBuffer,
    pub rows: Vec<MetricsRow>,
    env: Env,
    rng: ChaCha8Rng,
    episode_id: u64,
    step_in_episode: u32,
    /// Steps taken in total, random phase included.
    env_steps: u64,
    /// Steps taken after the random phase.
    agent_steps: u64,
    aux_calls: u64,
    accum: Accum,
    wall_before: f64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.env_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let agent = Agent::new(&cfg.sac_config(spec.action_dim), &cfg.encoder_config(), &mut rng)?;
        let aux = AuxModule::new(&cfg.aux_config(), agent.encoder.as_vit(), &agent.encoder_store, &mut rng)?;
        let replay = ReplayBuffer::new(cfg.replay_capacity, pixrl_envsim::render::FRAME_LEN, spec.action_dim)?;
        Ok(Self {
            env: Env::new(spec),
            spec,
            agent,
            aux,
            replay,
            rows: Vec::new(),
            rng,
            episode_id: 0,
            step_in_episode: 0,
            env_steps: 0,
            agent_steps: 0,
            aux_calls: 0,
            accum: Accum::default(),
            wall_before: 0.0,
            started: Instant::now(),
            cfg,
        })
    }

    pub fn agent_steps(&self) -> u64 {
        self.agent_steps
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn update_counts(&self) -> UpdateCounts {
        UpdateCounts { critic: self.agent.critic_updates, actor: self.agent.actor_updates, aux: self.aux_calls }
    }

    fn channels(&self) -> usize {
        self.cfg.channels()
    }

    fn wall_seconds(&self) -> f64 {
        if self.cfg.record_wall_time {
            self.wall_before + self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// One environment step. Random actions during the initial phase.
    fn env_step(&mut self, random: bool) -> Result<()> {
        if self.env.current_observation().is_none() || self.env.is_done() {
            let seed = self.rng.random::<u64>();
            self.env.reset(seed);
            self.episode_id += 1;
            self.step_in_episode = 0;
        }
        let obs = self.env.current_observation().expect("env was reset");
        let action: Vec<f32> = if random {
            (0..self.spec.action_dim).map(|_| self.rng.random_range(-1.0f32..=1.0)).collect()
        } else {
            let images = center_images::<f32>(&[obs.stacked()], self.channels())?;
            self.agent.act(&images, ActMode::Train, &mut self.rng)?
        };
        let res = self.env.step(&action)?;
        self.replay.push(Transition {
            frame: obs.latest().to_vec(),
            action,
            reward: res.reward as f32,
            terminal: res.terminal,
            episode_id: self.episode_id,
            step_in_episode: self.step_in_episode,
        })?;
        self.step_in_episode += 1;
        self.env_steps += 1;
        Ok(())
    }

    /// Randomly cropped RL batch.
    fn sample_batch(&mut self) -> Result<SacBatch<f32>> {
        let c = self.channels();
        let b = self.replay.sample(self.cfg.batch_size, &mut self.rng)?;
        let stack_len = c * augment::INPUT_SIZE * augment::INPUT_SIZE;
        let crop_len = c * CROP_SIZE * CROP_SIZE;
        let mut obs = Vec::with_capacity(b.batch * crop_len);
        let mut next = Vec::with_capacity(b.batch * crop_len);
        for i in 0..b.batch {
            let o = &b.obs[i * stack_len..(i + 1) * stack_len];
            augment::crop_into(o, c, augment::random_offset(&mut self.rng), &mut obs)?;
            let n = &b.next_obs[i * stack_len..(i + 1) * stack_len];
            augment::crop_into(n, c, augment::random_offset(&mut self.rng), &mut next)?;
        }
        let a = self.spec.action_dim;
        Ok(SacBatch {
            obs: images_from_u8(&obs, b.batch, c, CROP_SIZE)?,
            next_obs: images_from_u8(&next, b.batch, c, CROP_SIZE)?,
            action: Tensor::new(&[b.batch, a], b.action)?,
            reward: Tensor::new(&[b.batch, 1], b.reward)?,
            not_done: Tensor::new(&[b.batch, 1], b.not_done)?,
        })
    }

    /// One agent step: act, store, critic/actor updates, auxiliary update.
    fn agent_step(&mut self) -> Result<()> {
        self.env_step(false)?;
        let batch = self.sample_batch()?;
        let stats = self.agent.update(&batch, &mut self.rng)?;
        self.accum.critic.0 += stats.critic_loss;
        self.accum.critic.1 += 1.0;
        if let Some(l) = stats.actor_loss {
            self.accum.actor.0 += l;
            self.accum.actor.1 += 1.0;
        }
        let vit = self.agent.encoder.as_vit().cloned();
        let aux = match self.aux.task() {
            AuxTask::None => None,
            AuxTask::Data2vec | AuxTask::Mae => {
                Some(self.aux.update(vit.as_ref(), &mut self.agent.encoder_store, AuxInput::Cropped(&batch.obs), &mut self.rng)?)
            }
            AuxTask::Contrastive => {
                let n = self.cfg.contrastive_batch_size;
                let idx = self.replay.sample_indices(n, &mut self.rng)?;
                let stacks = self.replay.gather(&idx).obs;
                let (q, k) = contrastive_pair::<f32, _>(&stacks, n, self.channels(), &mut self.rng)?;
                Some(self.aux.update(vit.as_ref(), &mut self.agent.encoder_store, AuxInput::Pair(&q, &k), &mut self.rng)?)
            }
        };
        if let Some(s) = aux {
            self.accum.aux.0 += s.loss;
            self.accum.aux.1 += 1.0;
        }
        self.aux_calls += 1;
        self.agent_steps += 1;
        Ok(())
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalResult> {
        evaluate(&self.agent, &self.spec, episodes, self.cfg.seed)
    }

    /// Evaluates and appends a metrics row for the current step.
    pub fn record_row(&mut self) -> Result<()> {
        let eval = self.evaluate(self.cfg.eval_episodes)?;
        let row = MetricsRow {
            agent_step: self.agent_steps,
            mean_return: eval.mean,
            std_return: eval.std,
            rl_critic_loss: Accum::mean(self.accum.critic),
            rl_actor_loss: Accum::mean(self.accum.actor),
            aux_loss: Accum::mean(self.accum.aux),
            alpha: self.agent.alpha(),
            wall_seconds: self.wall_seconds(),
        };
        self.rows.push(row);
        self.accum = Accum::default();
        Ok(())
    }

    /// Advances to `target` agent steps, running the random phase first and
    /// recording scheduled evaluation rows (step 0 and every
    /// `eval_frequency` steps).
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        while self.env_steps < self.cfg.initial_steps {
            self.env_step(true)?;
        }
        if self.rows.is_empty() && self.agent_steps == 0 {
            self.record_row()?;
        }
        while self.agent_steps < target {
            self.agent_step()?;
            if self.agent_steps.is_multiple_of(self.cfg.eval_frequency) {
                self.record_row()?;
            }
        }
        Ok(())
    }

    /// Adds a final row unless the current step already has one.
    pub fn finish(&mut self) -> Result<&[MetricsRow]> {
        if self.rows.last().map(|r| r.agent_step) != Some(self.agent_steps) {
            self.record_row()?;
        }
        Ok(&self.rows)
    }

    pub fn write_metrics(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, metrics_csv(&self.rows))?;
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert("config", Entry::Bytes(self.cfg.to_json().into_bytes()));
        self.agent.export(&mut c);
        self.aux.export(&self.agent.encoder_store, &mut c);
        c.insert("trainer.rng", Entry::U64(rng_state(&self.rng)));
        c.insert(
            "trainer.counters",
            Entry::U64(vec![self.episode_id, self.step_in_episode as u64, self.env_steps, self.agent_steps, self.aux_calls]),
        );
        c.insert("trainer.accum", Entry::F64(self.accum.to_f64s()));
        c.insert("trainer.wall", Entry::F64(vec![self.wall_seconds()]));
        c.insert("trainer.rows", Entry::F64(self.rows.iter().flat_map(MetricsRow::to_f64s).collect()));
        c.insert("trainer.replay", Entry::Bytes(self.replay.to_bytes()));
        let env = if self.env.current_observation().is_some() { self.env.snapshot()? } else { Vec::new() };
        c.insert("trainer.env", Entry::Bytes(env));
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    /// Rebuilds a trainer from a checkpoint. `cfg` replaces the stored config
    /// when given, and must describe the same experiment.
    pub fn from_container(c: &Container, cfg: Option<TrainConfig>) -> Result<Self> {
        let stored: TrainConfig = serde_json::from_slice(c.bytes("config")?)?;
        let cfg = match cfg {
            Some(cfg) if !cfg.compatible_with(&stored) => {
                return Err(CoreError::Checkpoint("checkpoint was written under a different config".into()));
            }
            Some(cfg) => cfg,
            None => stored,
        };
        let mut t = Self::new(cfg)?;
        t.agent.import(c)?;
        t.aux.import(&t.agent.encoder_store, c)?;
        t.rng = rng_from_state(c.u64s("trainer.rng")?)?;
        let &[episode_id, step_in_episode, env_steps, agent_steps, aux_calls] = c.u64s("trainer.counters")? else {
            return Err(CoreError::Checkpoint("trainer counters malformed".into()));
        };
        t.episode_id = episode_id;
        t.step_in_episode = step_in_episode as u32;
        t.env_steps = env_steps;
        t.agent_steps = agent_steps;
        t.aux_calls = aux_calls;
        let accum = c.f64s("trainer.accum")?;
        if accum.len() != 6 {
            return Err(CoreError::Checkpoint("metric accumulators malformed".into()));
        }
        t.accum = Accum::from_f64s(accum);
        t.wall_before = c.f64s("trainer.wall")?.first().copied().unwrap_or(0.0);
        let rows = c.f64s("trainer.rows")?;
        if rows.len() % MetricsRow::FIELDS != 0 {
            return Err(CoreError::Checkpoint("metrics rows malformed".into()));
        }
        t.rows = rows.chunks_exact(MetricsRow::FIELDS).map(MetricsRow::from_f64s).collect();
        t.replay = ReplayBuffer::from_bytes(c.bytes("trainer.replay")?)?;
        if t.replay.capacity() != t.cfg.replay_capacity || t.replay.action_dim() != t.spec.action_dim {
            return Err(CoreError::Checkpoint("replay layout does not match the config".into()));
        }
        let env = c.bytes("trainer.env")?;
        if !env.is_empty() {
            t.env.restore(env)?;
        }
        Ok(t)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, cfg: Option<TrainConfig>) -> Result<Self> {
        Self::from_container(&Container::load(path)?, cfg)
    }
}

/// Files produced by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Runs (or resumes) a full training run, writing metrics and a final
/// checkpoint into `out_dir`.
pub fn train(cfg: TrainConfig, out_dir: impl AsRef<Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, out_dir, resume, |_| {})
}

/// [`train`], calling `on_row` for every metrics row as it is recorded.
pub fn train_with<F>(cfg: TrainConfig, out_dir: impl AsRef<Path>, resume: Option<&Path>, mut on_row: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRow),
{
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let name = cfg.run_name();
    let metrics_path = out_dir.join(format!("{name}.csv"));
    let checkpoint_path = out_dir.join(format!("{name}.ckpt"));
    let mut t = match resume {
        Some(p) => Trainer::load_checkpoint(p, Some(cfg))?,
        None => Trainer::new(cfg)?,
    };
    let mut reported = t.rows.len();
    // random phase and the step-0 row
    t.run_until(t.agent_steps())?;
    t.rows[reported..].iter().for_each(&mut on_row);
    reported = t.rows.len();
    let total = t.cfg.total_steps;
    let every = t.cfg.checkpoint_frequency;
    let eval_every = t.cfg.eval_frequency;
    while t.agent_steps() < total {
        let step = t.agent_steps();
        let mut next = (step / eval_every + 1) * eval_every;
        if every > 0 {
            next = next.min((step / every + 1) * every);
        }
        let next = next.min(total);
        t.run_until(next)?;
        if t.rows.len() > reported {
            t.rows[reported..].iter().for_each(&mut on_row);
            reported = t.rows.len();
            t.write_metrics(&metrics_path)?;
        }
        if every > 0 && next % every == 0 {
            t.save_checkpoint(&checkpoint_path)?;
        }
    }
    // checkpoint before the closing row so a resumed run rebuilds the same rows
    t.run_until(total)?;
    t.save_checkpoint(&checkpoint_path)?;
    t.finish()?;
    t.rows[reported..].iter().for_each(&mut on_row);
    t.write_metrics(&metrics_path)?;
    Ok(TrainOutcome { metrics_path, checkpoint_path, rows: t.rows.clone() })
}
