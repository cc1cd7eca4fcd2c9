//! Turning per-frame distributions into label sequences.

mod beam;
mod lm;
#[cfg(test)]
mod tests;

pub use beam::{
    beam_decode, beam_search, fuse_score, lm_fused_beam_decode, lm_fused_beam_search,
    BeamHypothesis, BeamOutcome,
};
pub use lm::{lm_train, CharNGramModel, EMPTY_CONTEXT, EOS_TOKEN};

use crate::ctc::{collapse, FrameDistributionSeq, LabelSeq};
use crate::scalar::Real;

/// Per-frame argmax (lowest index wins ties), then collapse.
pub fn greedy_decode<S: Real>(dist: &FrameDistributionSeq<S>) -> LabelSeq {
    let path: Vec<usize> = (0..dist.frames())
        .map(|t| {
            let row = dist.row(t);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, dist.blank())
}
