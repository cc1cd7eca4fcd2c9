//! The recognition network: convolutional backbone, context-based spatial
//! attention blended with a motion prior, pooling, frame embedding, a causal
//! transformer encoder, and a `C + 1` classifier.

mod checkpoint;
mod config;
mod network;
mod prior;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Manifest, ParamEntry,
    CHECKPOINT_MAGIC,
};
pub use config::{ModelConfig, CONV_KERNEL};
pub use network::{causal_mask, positional_encoding, AttentionVars, ForwardVars, Mode, Model};
pub use prior::{motion_prior, MotionPrior, PrecomputedPrior, PriorProvider};
