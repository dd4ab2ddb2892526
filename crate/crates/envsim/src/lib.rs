//! Software-rendered 2D control tasks with pixel observations.
//!
//! Three tasks are built in: `cartpole_swingup`, `reacher_easy` and
//! `cup_catch`. Each agent step repeats the action for `action_repeat`
//! physics steps of 0.01 s and sums the per-step rewards, so an episode of
//! 1000 physics steps returns at most 1000. Observations are the last three
//! rendered 3×100×100 RGB frames.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod log;
pub mod physics;
pub mod render;

pub use log::{read_log, LogRecord, ReplayLog};
pub use physics::{physics_step, reward, Body, PhysicsState};
pub use render::{FRAME_LEN, HEIGHT, WIDTH};

pub const FRAME_STACK: usize = 3;
pub const EPISODE_LENGTH: u32 = 1000;
pub const PHYSICS_DT: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("action repeat {repeat} does not divide episode length {length}")]
    InvalidRepeat { repeat: u32, length: u32 },
    #[error("step called before reset")]
    NotReset,
    #[error("step called after the episode ended; reset first")]
    EpisodeDone,
    #[error("expected {expected} action components, got {got}")]
    ActionDim { expected: usize, got: usize },
    #[error("action contains a non-finite value")]
    NonFiniteAction,
    #[error("corrupt environment snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    CartpoleSwingup,
    ReacherEasy,
    CupCatch,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::CartpoleSwingup, Task::ReacherEasy, Task::CupCatch];

    pub fn name(self) -> &'static str {
        match self {
            Task::CartpoleSwingup => "cartpole_swingup",
            Task::ReacherEasy => "reacher_easy",
            Task::CupCatch => "cup_catch",
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Task::ReacherEasy => 2,
            Task::CartpoleSwingup | Task::CupCatch => 1,
        }
    }

    pub fn default_action_repeat(self) -> u32 {
        match self {
            Task::CartpoleSwingup => 8,
            Task::ReacherEasy | Task::CupCatch => 4,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| EnvError::UnknownEnv(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub task: Task,
    pub action_dim: usize,
    pub action_repeat: u32,
    /// Physics steps per episode.
    pub episode_length: u32,
    pub dt: f64,
}

impl EnvSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            action_dim: task.action_dim(),
            action_repeat: task.default_action_repeat(),
            episode_length: EPISODE_LENGTH,
            dt: PHYSICS_DT,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_action_repeat(mut self, repeat: u32) -> Result<Self> {
        if repeat == 0 || !self.episode_length.is_multiple_of(repeat) {
            return Err(EnvError::InvalidRepeat { repeat, length: self.episode_length });
        }
        self.action_repeat = repeat;
        Ok(self)
    }

    /// Agent steps in a full episode.
    pub fn agent_steps_per_episode(&self) -> u32 {
        self.episode_length / self.action_repeat
    }
}

/// The three most recent frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelObservation {
    pub frames: [Vec<u8>; FRAME_STACK],
}

impl PixelObservation {
    /// Channel concatenation, `9 × 100 × 100`.
    pub fn stacked(&self) -> Vec<u8> {
        self.frames.concat()
    }

    pub fn latest(&self) -> &[u8] {
        &self.frames[FRAME_STACK - 1]
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: PixelObservation,
    pub reward: f64,
    /// Episode over (time limit reached or terminal state).
    pub done: bool,
    /// True termination, as opposed to the time limit. None of the built-in
    /// tasks terminate early, so this is false for them.
    pub terminal: bool,
    pub physics_frames_consumed: u32,
}

/// One environment instance with its frame stack.
#[derive(Debug)]
pub struct Env {
    spec: EnvSpec,
    state: Option<PhysicsState>,
    frames: VecDeque<Vec<u8>>,
    done: bool,
    log: Option<ReplayLog>,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Self {
        Self { spec, state: None, frames: VecDeque::with_capacity(FRAME_STACK), done: false, log: None }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> Option<&PhysicsState> {
        self.state.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Current frame stack, or `None` before the first reset.
    pub fn current_observation(&self) -> Option<PixelObservation> {
        self.state.map(|_| self.observation())
    }

    /// Starts writing a [`ReplayLog`] of every subsequent agent step.
    pub fn attach_log(&mut self, out: Box<dyn std::io::Write + Send>) -> Result<()> {
        let state_dim = initial_body(self.spec.task, &mut ChaCha8Rng::seed_from_u64(0)).to_vec().len();
        self.log = Some(ReplayLog::new(out, state_dim, self.spec.action_dim)?);
        Ok(())
    }

    pub fn detach_log(&mut self) -> Result<()> {
        if let Some(mut log) = self.log.take() {
            log.flush()?;
        }
        Ok(())
    }

    /// Draws the initial state from `ChaCha8Rng::seed_from_u64(seed)` and
    /// fills the stack with three copies of the first frame.
    pub fn reset(&mut self, seed: u64) -> PixelObservation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = PhysicsState { body: initial_body(self.spec.task, &mut rng), step: 0 };
        self.install(state)
    }

    /// Resets to an explicit state.
    pub fn reset_to(&mut self, state: PhysicsState) -> PixelObservation {
        self.install(state)
    }

    fn install(&mut self, state: PhysicsState) -> PixelObservation {
        let frame = physics::render(&state);
        self.frames.clear();
        self.frames.extend(std::iter::repeat_n(frame, FRAME_STACK));
        self.state = Some(state);
        self.done = false;
        self.observation()
    }

    fn observation(&self) -> PixelObservation {
        PixelObservation { frames: std::array::from_fn(|i| self.frames[i].clone()) }
    }

    pub fn step(&mut self, action: &[f32]) -> Result<StepResult> {
        let mut state = self.state.ok_or(EnvError::NotReset)?;
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action.len() != self.spec.action_dim {
            return Err(EnvError::ActionDim { expected: self.spec.action_dim, got: action.len() });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let action: Vec<f64> = action.iter().map(|&a| (a as f64).clamp(-1.0, 1.0)).collect();
        let before = state.body.to_vec();
        let mut total = 0.0;
        let mut consumed = 0;
        while consumed < self.spec.action_repeat && state.step < self.spec.episode_length {
            state = physics_step(&state, &action, self.spec.dt);
            total += reward(&state);
            consumed += 1;
        }
        if let Some(log) = &mut self.log {
            log.record(&before, &action, total)?;
        }
        self.state = Some(state);
        self.done = state.step >= self.spec.episode_length;
        self.frames.pop_front();
        self.frames.push_back(physics::render(&state));
        Ok(StepResult {
            observation: self.observation(),
            reward: total,
            done: self.done,
            terminal: false,
            physics_frames_consumed: consumed,
        })
    }

    /// Serializes the physics state, frame stack and done flag.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let state = self.state.ok_or(EnvError::NotReset)?;
        let mut out = Vec::new();
        out.push(self.spec.task as u8);
        out.extend_from_slice(&state.step.to_le_bytes());
        out.push(self.done as u8);
        for v in state.body.to_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for f in &self.frames {
            out.extend_from_slice(f);
        }
        Ok(out)
    }

    /// Inverse of [`Env::snapshot`]; the snapshot must come from the same task.
    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let bad = |m: &str| EnvError::Snapshot(m.to_string());
        let template = initial_body(self.spec.task, &mut ChaCha8Rng::seed_from_u64(0));
        let n = template.to_vec().len();
        if bytes.len() != 6 + 8 * n + FRAME_STACK * FRAME_LEN {
            return Err(bad("wrong length"));
        }
        if bytes[0] != self.spec.task as u8 {
            return Err(bad("snapshot is from another task"));
        }
        let step = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let done = bytes[5] != 0;
        let vals: Vec<f64> =
            bytes[6..6 + 8 * n].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let body = template.with_values(&vals).ok_or_else(|| bad("state arity"))?;
        let frames = &bytes[6 + 8 * n..];
        self.frames = frames.chunks_exact(FRAME_LEN).map(<[u8]>::to_vec).collect();
        self.state = Some(PhysicsState { body, step });
        self.done = done;
        Ok(())
    }
}

fn initial_body(task: Task, rng: &mut ChaCha8Rng) -> Body {
    match task {
        Task::CartpoleSwingup => Body::Cartpole(physics::cartpole_initial(rng)),
        Task::ReacherEasy => Body::Reacher(physics::reacher_initial(rng)),
        Task::CupCatch => Body::Cup(physics::cup_initial(rng)),
    }
}
