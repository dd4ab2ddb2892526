//! Small differentiable tensor library: a reverse-mode tape over dense
//! row-major tensors, named parameter stores with Adam and EMA shadows, a
//! binary checkpoint container, and the layers the encoders are built from.
//!
//! Everything is generic over [`Real`], so the same model code runs in `f32`
//! for training and in `f64` for finite-difference checks.

pub mod checkpoint;
pub mod graph;
mod kernels;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;

pub use checkpoint::{Container, Entry};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use params::{ema_update, AdamConfig, AdamState, EmaShadow, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
