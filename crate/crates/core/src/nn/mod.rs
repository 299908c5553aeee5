//! Dense numerical substrate: parameter storage, hand-derived reverse-mode
//! blocks, AdamW and the checkpoint container.

mod adamw;
mod attention;
mod checkpoint;
pub mod gradcheck;
mod gru;
pub mod linalg;
mod mlp;
mod params;

pub use adamw::AdamW;
pub use attention::{AttentionCache, SelfAttention};
pub use checkpoint::Checkpoint;
pub use gru::{GruCache, GruCell};
pub use mlp::{Activation, BlockKind, DenseBlockSpec, Mlp, MlpCache};
pub use params::{backward, evaluate, GradientReport, Gradients, LossGraph, Param, ParamStore};
