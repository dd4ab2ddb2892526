//! Optional binary capture of what an environment did.
//!
//! The file starts with the 8-byte magic `PXRLLOG1`, then `state_dim: u32`
//! and `action_dim: u32`. Each agent step appends one record of
//! `state_dim + action_dim + 1` little-endian `f32`s: the physics state the
//! action was taken in, the clamped action, and the summed reward.

use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 8] = b"PXRLLOG1";

pub struct ReplayLog {
    out: Box<dyn Write + Send>,
    state_dim: usize,
    action_dim: usize,
}

impl std::fmt::Debug for ReplayLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayLog").field("state_dim", &self.state_dim).field("action_dim", &self.action_dim).finish()
    }
}

impl ReplayLog {
    pub fn new(mut out: Box<dyn Write + Send>, state_dim: usize, action_dim: usize) -> io::Result<Self> {
        out.write_all(MAGIC)?;
        out.write_all(&(state_dim as u32).to_le_bytes())?;
        out.write_all(&(action_dim as u32).to_le_bytes())?;
        Ok(Self { out, state_dim, action_dim })
    }

    pub fn record(&mut self, state: &[f64], action: &[f64], reward: f64) -> io::Result<()> {
        debug_assert_eq!(state.len(), self.state_dim);
        debug_assert_eq!(action.len(), self.action_dim);
        let mut buf = Vec::with_capacity(4 * (state.len() + action.len() + 1));
        for v in state.iter().chain(action).chain(std::iter::once(&reward)) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.out.write_all(&buf)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// One decoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
}

/// Reads a whole log back.
pub fn read_log(mut input: impl Read) -> io::Result<Vec<LogRecord>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(bad("not a replay log"));
    }
    let state_dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let action_dim = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let width = 4 * (state_dim + action_dim + 1);
    let body = &buf[16..];
    if body.len() % width != 0 {
        return Err(bad("truncated record"));
    }
    Ok(body
        .chunks_exact(width)
        .map(|rec| {
            let vals: Vec<f32> = rec.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            LogRecord {
                state: vals[..state_dim].to_vec(),
                action: vals[state_dim..state_dim + action_dim].to_vec(),
                reward: vals[state_dim + action_dim],
            }
        })
        .collect())
}
