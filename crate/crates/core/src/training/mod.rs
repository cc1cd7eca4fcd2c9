//! Optimisation, the training loop, evaluation and the ablation grid.

mod ablation;
mod optimizer;
mod trainer;

pub use ablation::{ablate, AblationRow, AblationTable};
pub use optimizer::{clip_grad_norm, AdamW};
pub use trainer::{
    clip_distribution, evaluate, prepare_clip, prepare_clip_with, train, Decoder, EpochCallback, EpochRecord, TrainOptions,
    TrainOutcome,
};
