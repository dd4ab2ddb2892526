//! Ring buffer of single frames with stack reconstruction at sample time.
//!
//! Entry `t` holds the newest frame of the observation the agent acted on,
//! together with that step's action, reward and termination flag. The
//! observation stack for `t` is frames `t−2, t−1, t`; at the start of an
//! episode the missing predecessors repeat the episode's first frame. The
//! next observation is the stack at `t+1`, so `t` is only sampleable once its
//! successor from the same episode has been pushed (or when it is terminal).

use rand::Rng;

use crate::{CoreError, Result};

pub const STACK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub frame: Vec<u8>,
    pub action: Vec<f32>,
    pub reward: f32,
    /// True termination. Time-limit ends are not terminal.
    pub terminal: bool,
    pub episode_id: u64,
    /// Agent steps since the episode's reset; 0 for the first.
    pub step_in_episode: u32,
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub batch: usize,
    /// `batch × STACK·frame_len`.
    pub obs: Vec<u8>,
    pub next_obs: Vec<u8>,
    /// `batch × action_dim`.
    pub action: Vec<f32>,
    pub reward: Vec<f32>,
    /// 0 for terminal transitions, 1 otherwise.
    pub not_done: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    frame_len: usize,
    action_dim: usize,
    slots: Vec<Transition>,
    /// Total pushes ever; logical index `t` lives in slot `t % capacity`.
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, frame_len: usize, action_dim: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(CoreError::Config("replay capacity must be at least 2".into()));
        }
        Ok(Self { capacity, frame_len, action_dim, slots: Vec::new(), inserted: 0 })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    /// Oldest logical index still stored.
    pub fn oldest(&self) -> u64 {
        self.inserted - self.slots.len() as u64
    }

    /// Slot the next push will write; at capacity this is the evicted entry.
    pub fn next_slot(&self) -> usize {
        (self.inserted % self.capacity as u64) as usize
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.frame.len() != self.frame_len || t.action.len() != self.action_dim {
            return Err(CoreError::Shape(format!(
                "transition with {} frame bytes and {} actions, expected {} and {}",
                t.frame.len(),
                t.action.len(),
                self.frame_len,
                self.action_dim
            )));
        }
        let slot = self.next_slot();
        if self.slots.len() < self.capacity {
            self.slots.push(t);
        } else {
            self.slots[slot] = t;
        }
        self.inserted += 1;
        Ok(())
    }

    /// Entry at logical index `t`, if still stored.
    pub fn get(&self, t: u64) -> Option<&Transition> {
        (t >= self.oldest() && t < self.inserted).then(|| &self.slots[(t % self.capacity as u64) as usize])
    }

    /// Logical indices of the frames making up the stack at `t`, oldest first.
    fn stack_indices(&self, t: u64) -> Option<[u64; STACK]> {
        let e = self.get(t)?;
        let mut idx = [t; STACK];
        for (j, slot) in idx.iter_mut().enumerate() {
            let back = ((STACK - 1 - j) as u64).min(e.step_in_episode as u64);
            let p = t.checked_sub(back)?;
            if self.get(p)?.episode_id != e.episode_id {
                return None;
            }
            *slot = p;
        }
        Some(idx)
    }

    /// The three frames of the stack at `t`, oldest first.
    pub fn stack_frames(&self, t: u64) -> Option<[&[u8]; STACK]> {
        let idx = self.stack_indices(t)?;
        Some(idx.map(|i| self.get(i).unwrap().frame.as_slice()))
    }

    pub fn stack_at(&self, t: u64) -> Option<Vec<u8>> {
        self.stack_frames(t).map(|f| f.concat())
    }

    /// Index whose next observation is stored, or `t` itself for terminal entries.
    pub fn successor(&self, t: u64) -> Option<u64> {
        let e = self.get(t)?;
        if e.terminal {
            return Some(t);
        }
        let n = self.get(t + 1)?;
        (n.episode_id == e.episode_id && n.step_in_episode == e.step_in_episode + 1).then_some(t + 1)
    }

    pub fn is_valid(&self, t: u64) -> bool {
        self.stack_indices(t).is_some() && self.successor(t).is_some_and(|n| self.stack_indices(n).is_some())
    }

    pub fn num_valid(&self) -> usize {
        (self.oldest()..self.inserted).filter(|&t| self.is_valid(t)).count()
    }

    /// Uniform draw over valid indices by rejection.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<u64>> {
        if self.slots.len() < 2 {
            return Err(CoreError::InsufficientData { have: self.slots.len(), need: 2 });
        }
        let (lo, hi) = (self.oldest(), self.inserted);
        let mut out = Vec::with_capacity(batch);
        let mut misses = 0usize;
        while out.len() < batch {
            let t = rng.random_range(lo..hi);
            if self.is_valid(t) {
                out.push(t);
            } else {
                misses += 1;
                if misses > 1000 + 100 * batch {
                    return Err(CoreError::InsufficientData { have: self.num_valid(), need: 1 });
                }
            }
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<SampleBatch> {
        let idx = self.sample_indices(batch, rng)?;
        Ok(self.gather(&idx))
    }

    /// Materializes the transitions at valid indices.
    pub fn gather(&self, idx: &[u64]) -> SampleBatch {
        let mut b = SampleBatch {
            batch: idx.len(),
            obs: Vec::with_capacity(idx.len() * STACK * self.frame_len),
            next_obs: Vec::with_capacity(idx.len() * STACK * self.frame_len),
            action: Vec::with_capacity(idx.len() * self.action_dim),
            reward: Vec::with_capacity(idx.len()),
            not_done: Vec::with_capacity(idx.len()),
        };
        for &t in idx {
            let e = self.get(t).expect("valid index");
            let n = self.successor(t).expect("valid index");
            for f in self.stack_frames(t).expect("valid index") {
                b.obs.extend_from_slice(f);
            }
            for f in self.stack_frames(n).expect("valid index") {
                b.next_obs.extend_from_slice(f);
            }
            b.action.extend_from_slice(&e.action);
            b.reward.push(e.reward);
            b.not_done.push(if e.terminal { 0.0 } else { 1.0 });
        }
        b
    }

    /// Little-endian dump in logical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + self.slots.len() * (self.frame_len + 4 * self.action_dim + 24));
        for v in [self.capacity as u64, self.frame_len as u64, self.action_dim as u64, self.inserted, self.slots.len() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.oldest()..self.inserted {
            let e = self.get(t).unwrap();
            out.extend_from_slice(&e.frame);
            e.action.iter().for_each(|a| out.extend_from_slice(&a.to_le_bytes()));
            out.extend_from_slice(&e.reward.to_le_bytes());
            out.push(e.terminal as u8);
            out.extend_from_slice(&e.episode_id.to_le_bytes());
            out.extend_from_slice(&e.step_in_episode.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || CoreError::Checkpoint("corrupt replay buffer".into());
        let word = |i: usize| -> Result<u64> {
            bytes.get(8 * i..8 * i + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).ok_or_else(bad)
        };
        let (capacity, frame_len, action_dim, inserted, len) =
            (word(0)? as usize, word(1)? as usize, word(2)? as usize, word(3)?, word(4)? as usize);
        let rec = frame_len + 4 * action_dim + 4 + 1 + 8 + 4;
        if len > capacity || len as u64 > inserted || bytes.len() != 40 + len * rec {
            return Err(bad());
        }
        // a buffer that never wrapped starts at logical index 0
        if len < capacity && inserted != len as u64 {
            return Err(bad());
        }
        let oldest = inserted - len as u64;
        let mut placed: Vec<Option<Transition>> = vec![None; len];
        for (k, chunk) in bytes[40..].chunks_exact(rec).enumerate() {
            let (frame, rest) = chunk.split_at(frame_len);
            let (act, rest) = rest.split_at(4 * action_dim);
            let action = act.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let slot = ((oldest + k as u64) % capacity as u64) as usize;
            placed[slot] = Some(Transition {
                frame: frame.to_vec(),
                action,
                reward: f32::from_le_bytes(rest[..4].try_into().unwrap()),
                terminal: rest[4] != 0,
                episode_id: u64::from_le_bytes(rest[5..13].try_into().unwrap()),
                step_in_episode: u32::from_le_bytes(rest[13..17].try_into().unwrap()),
            });
        }
        let mut buf = Self::new(capacity, frame_len, action_dim)?;
        buf.slots = placed.into_iter().map(|e| e.ok_or_else(bad)).collect::<Result<_>>()?;
        buf.inserted = inserted;
        Ok(buf)
    }
}
