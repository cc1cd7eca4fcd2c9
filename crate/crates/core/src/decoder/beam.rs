//! Prefix beam search, optionally fused with a character language model.

use std::collections::BTreeMap;

use super::lm::CharNGramModel;
use crate::ctc::{FrameDistributionSeq, LabelSeq};
use crate::error::{contract, Result};
use crate::numerics::{log_add, Grid};
use crate::scalar::Real;

/// One surviving prefix with its blank-ending and letter-ending log masses.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis<S> {
    pub labels: LabelSeq,
    pub log_blank: S,
    pub log_nonblank: S,
    /// Ranking score from the last step that produced this hypothesis.
    pub score: S,
}

impl<S: Real> BeamHypothesis<S> {
    /// Total log probability of all alignments collapsing to this prefix so far.
    pub fn log_mass(&self) -> S {
        log_add(self.log_blank, self.log_nonblank)
    }
}

/// Final beam ranked best first; `best()` is the decoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutcome<S> {
    pub ranked: Vec<BeamHypothesis<S>>,
}

impl<S: Real> BeamOutcome<S> {
    pub fn best(&self) -> &LabelSeq {
        &self.ranked[0].labels
    }
}

/// The fused ranking score `(1 - alpha) * s_b + alpha * lm`.
pub fn fuse_score(alpha: f64, beam_prob: f64, lm_prob: f64) -> f64 {
    (1.0 - alpha) * beam_prob + alpha * lm_prob
}

/// Shared core: `rank(labels, normalized_mass, is_final)` returns the score
/// used for pruning; equal scores fall back to the smaller prefix.
fn prefix_beam<S: Real>(
    dist: &FrameDistributionSeq<S>,
    beam_width: usize,
    rank: impl Fn(&[usize], S, bool) -> S,
) -> Result<BeamOutcome<S>> {
    if beam_width == 0 {
        return contract("beam width must be >= 1");
    }
    let blank = dist.blank();
    let letters = dist.classes() - 1;
    let log_probs: Grid<S> = dist.log_probs();
    let ninf = S::neg_infinity();

    let mut beam = vec![BeamHypothesis {
        labels: LabelSeq::default(),
        log_blank: S::zero(),
        log_nonblank: ninf,
        score: S::one(),
    }];
    for t in 0..dist.frames() {
        let lp = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, (S, S)> = BTreeMap::new();
        for h in &beam {
            let total = h.log_mass();
            let here = next.entry(h.labels.0.clone()).or_insert((ninf, ninf));
            here.0 = log_add(here.0, total + lp[blank]);
            let last = h.labels.0.last().copied();
            for (c, &lp_c) in lp.iter().enumerate().take(letters) {
                if lp_c == ninf {
                    continue;
                }
                let mut extended = h.labels.0.clone();
                extended.push(c);
                let from = if Some(c) == last {
                    let stay = next.entry(h.labels.0.clone()).or_insert((ninf, ninf));
                    stay.1 = log_add(stay.1, h.log_nonblank + lp_c);
                    h.log_blank
                } else {
                    total
                };
                let slot = next.entry(extended).or_insert((ninf, ninf));
                slot.1 = log_add(slot.1, from + lp_c);
            }
        }
        beam = rank_and_prune(next, beam_width, &rank, false);
    }
    let finals: BTreeMap<Vec<usize>, (S, S)> = beam
        .into_iter()
        .map(|h| (h.labels.0, (h.log_blank, h.log_nonblank)))
        .collect();
    let ranked = rank_and_prune(finals, beam_width, &rank, true);
    Ok(BeamOutcome { ranked })
}

fn rank_and_prune<S: Real>(
    candidates: BTreeMap<Vec<usize>, (S, S)>,
    beam_width: usize,
    rank: &impl Fn(&[usize], S, bool) -> S,
    is_final: bool,
) -> Vec<BeamHypothesis<S>> {
    let masses: Vec<S> = candidates.values().map(|&(b, n)| log_add(b, n)).collect();
    let norm = crate::numerics::log_sum_exp(&masses).unwrap_or(S::neg_infinity());
    let mut hyps: Vec<BeamHypothesis<S>> = candidates
        .into_iter()
        .zip(&masses)
        .filter(|(_, &m)| m > S::neg_infinity())
        .map(|((labels, (log_blank, log_nonblank)), &m)| {
            let share = if norm > S::neg_infinity() {
                (m - norm).exp()
            } else {
                S::zero()
            };
            BeamHypothesis {
                score: rank(&labels, share, is_final),
                labels: LabelSeq(labels),
                log_blank,
                log_nonblank,
            }
        })
        .collect();
    hyps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.labels.cmp(&b.labels))
    });
    hyps.truncate(beam_width);
    hyps
}

/// Plain prefix beam search ranked by collapsed-sequence probability mass.
pub fn beam_search<S: Real>(
    dist: &FrameDistributionSeq<S>,
    beam_width: usize,
) -> Result<BeamOutcome<S>> {
    prefix_beam(dist, beam_width, |_, share, _| share)
}

pub fn beam_decode<S: Real>(dist: &FrameDistributionSeq<S>, beam_width: usize) -> Result<LabelSeq> {
    Ok(beam_search(dist, beam_width)?.best().clone())
}

/// Prefix beam search where each candidate is ranked by its normalized beam
/// mass blended with the language model probability of its newest letter.
/// The empty prefix contributes an LM term of 1; the final ranking uses the
/// probability of ending the word after each surviving prefix.
pub fn lm_fused_beam_search<S: Real>(
    dist: &FrameDistributionSeq<S>,
    beam_width: usize,
    lm: &CharNGramModel,
    alpha: f64,
) -> Result<BeamOutcome<S>> {
    if !(0.0..=1.0).contains(&alpha) {
        return contract(format!("fusion weight {alpha} outside [0, 1]"));
    }
    if lm.alphabet().len() + 1 != dist.classes() {
        return contract(format!(
            "language model has {} letters but the distribution has {} classes",
            lm.alphabet().len(),
            dist.classes()
        ));
    }
    prefix_beam(dist, beam_width, |labels, share, is_final| {
        let lm_term = if is_final {
            lm.prob(labels, lm.eos())
        } else {
            match labels.split_last() {
                Some((&last, history)) => lm.prob(history, last),
                None => 1.0,
            }
        };
        S::lit(fuse_score(alpha, share.as_f64(), lm_term))
    })
}

pub fn lm_fused_beam_decode<S: Real>(
    dist: &FrameDistributionSeq<S>,
    beam_width: usize,
    lm: &CharNGramModel,
    alpha: f64,
) -> Result<LabelSeq> {
    Ok(lm_fused_beam_search(dist, beam_width, lm, alpha)?.best().clone())
}
