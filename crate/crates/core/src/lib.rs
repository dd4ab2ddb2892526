//! Pixel-based soft actor-critic with a shared ViT or CNN encoder and
//! pluggable self-supervised auxiliary objectives.

pub mod augment;
pub mod auxtasks;
pub mod config;
pub mod encoders;
pub mod plot;
pub mod replay;
pub mod sac;
pub mod trainer;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("replay holds {have} sampleable transitions, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Nn(#[from] pixrl_nn::NnError),
    #[error(transparent)]
    Env(#[from] pixrl_envsim::EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
