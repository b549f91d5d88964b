//! Minimal differentiable numerics for desk-scale representation learning.
//!
//! The crate provides a dense [`Tensor`], a tape-based [`Graph`] with exact
//! reverse-mode gradients for the op set the encoders need, a small CNN and a
//! tiny vision transformer ([`Encoder`]), SGD with momentum, learning-rate
//! schedules and a binary checkpoint format.
//!
//! Everything is generic over [`Float`] so that gradient checks can run the
//! same code in `f64`; training uses `f32`.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
mod scalar;
pub mod schedule;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use encoder::{Architecture, ChannelNorm, ConvSpec, Encoder, EncoderConfig, EncoderOutput, TransformerSpec};
pub use graph::{Gradients, Graph, Var};
pub use layers::Mlp;
pub use optim::{clip_grad_norm, Sgd, SgdConfig};
pub use params::{ParamSet, Parameter};
pub use scalar::Float;
pub use schedule::{cosine_lr, step_lr, LrSchedule};
pub use tensor::{l2_normalize_rows, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
