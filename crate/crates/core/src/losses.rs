//! Maximum-entropy regulariser and the combined training objective.

use std::f64::consts::LN_2;

use crate::ctc::{ctc_loss, ctc_loss_node, FrameDistributionSeq, LabelSeq};
use crate::error::{contract, Result};
use crate::numerics::{Tape, Var};
use crate::scalar::Real;

/// Probabilities below this are clamped inside the logarithm only.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// Loss terms of one sequence. `mel` is in bits, `ctc` and `total` in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<S> {
    pub ctc: S,
    pub mel: S,
    pub total: S,
    pub mel_weight: S,
    /// False when the target could not be aligned; `ctc` and `total` are then infinite.
    pub feasible: bool,
}

/// `log2(C') - mean per-frame entropy` in bits; zero for uniform frames,
/// `log2(C')` for one-hot frames.
pub fn max_entropy_loss<S: Real>(dist: &FrameDistributionSeq<S>) -> S {
    let floor = S::lit(ENTROPY_FLOOR);
    let ln2 = S::lit(LN_2);
    let mut total = S::zero();
    for t in 0..dist.frames() {
        for &p in dist.row(t) {
            total += p * p.max(floor).ln();
        }
    }
    let c = S::from_usize(dist.classes()).unwrap();
    let t = S::from_usize(dist.frames()).unwrap();
    c.log2() + total / (t * ln2)
}

fn check_weight<S: Real>(mel_weight: S) -> Result<()> {
    if !(mel_weight >= S::zero() && mel_weight <= S::one()) {
        return contract(format!("mel_weight {mel_weight} outside [0, 1]"));
    }
    Ok(())
}

/// `ctc + mel_weight * ln(2) * mel`.
pub fn combined_loss<S: Real>(
    dist: &FrameDistributionSeq<S>,
    target: &LabelSeq,
    mel_weight: S,
) -> Result<LossReport<S>> {
    check_weight(mel_weight)?;
    let ctc = ctc_loss(dist, target)?;
    let mel = max_entropy_loss(dist);
    Ok(LossReport {
        ctc: ctc.value,
        mel,
        total: ctc.value + mel_weight * S::lit(LN_2) * mel,
        mel_weight,
        feasible: ctc.feasible,
    })
}

/// Maximum-entropy loss (bits) of `softmax(logits)` recorded on a tape.
pub fn max_entropy_node<S: Real>(tape: &mut Tape<S>, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return contract("logits must be 2-D");
    }
    let probs = tape.softmax(logits)?;
    let logs = tape.log_clamp(probs, S::lit(ENTROPY_FLOOR));
    let plogp = tape.mul(probs, logs)?;
    let neg_entropy = tape.sum(plogp);
    let t = S::from_usize(shape[0]).unwrap();
    let scaled = tape.scale(neg_entropy, S::one() / (t * S::lit(LN_2)));
    Ok(tape.add_scalar(scaled, S::from_usize(shape[1]).unwrap().log2()))
}

/// Combined objective on a tape. Returns `None` for an unalignable target.
pub fn combined_loss_node<S: Real>(
    tape: &mut Tape<S>,
    logits: Var,
    target: &LabelSeq,
    mel_weight: S,
) -> Result<Option<(Var, LossReport<S>)>> {
    check_weight(mel_weight)?;
    let Some(ctc) = ctc_loss_node(tape, logits, target)? else {
        return Ok(None);
    };
    let mel = max_entropy_node(tape, logits)?;
    let weighted = tape.scale(mel, mel_weight * S::lit(LN_2));
    let total = tape.add(ctc, weighted)?;
    let report = LossReport {
        ctc: tape.value(ctc).item()?,
        mel: tape.value(mel).item()?,
        total: tape.value(total).item()?,
        mel_weight,
        feasible: true,
    };
    Ok(Some((total, report)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, Grid, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mel_examples() {
        let uniform = FrameDistributionSeq::<f64>::new(Grid::filled(&[4, 32], 1.0 / 32.0)).unwrap();
        assert!(max_entropy_loss(&uniform).abs() < 1e-12);

        let one_hot = FrameDistributionSeq::<f64>::new(Grid::from_fn(&[3, 32], |i| {
            if i % 32 == (i / 32) * 5 { 1.0 } else { 0.0 }
        }))
        .unwrap();
        assert!((max_entropy_loss(&one_hot) - 5.0).abs() < 1e-12);

        let mixed = FrameDistributionSeq::<f64>::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert!((max_entropy_loss(&mixed) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        let d = FrameDistributionSeq::<f64>::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        let t = LabelSeq(vec![0]);
        let r = combined_loss(&d, &t, 0.0).unwrap();
        assert_eq!(r.total, r.ctc);

        // one-hot frames spelling "0 - 1": ctc = 0, mel = log2(3)
        let d = FrameDistributionSeq::<f64>::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let r = combined_loss(&d, &LabelSeq(vec![0, 1]), 0.3).unwrap();
        assert_eq!(r.ctc, 0.0);
        assert!((r.total - 0.3 * 3f64.log2() * LN_2).abs() < 1e-12);

        assert!(combined_loss(&d, &LabelSeq(vec![0]), 1.5).is_err());
        let r = combined_loss(&d, &LabelSeq(vec![0, 0, 0]), 0.1).unwrap();
        assert!(!r.feasible);
    }

    #[test]
    fn mel_nonnegative_and_zero_only_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let eps = 1e-3;
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let raw: Vec<f64> = (0..5).map(|_| 1.0 + rng.random_range(-eps..eps)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let d = FrameDistributionSeq::<f64>::from_rows(&rows).unwrap();
            let m = max_entropy_loss(&d);
            assert!(m > 0.0, "{m}");
        }
    }

    #[test]
    fn mel_permutation_invariant() {
        let d = FrameDistributionSeq::<f64>::from_rows(&[vec![0.1, 0.2, 0.7], vec![0.3, 0.3, 0.4]]).unwrap();
        let p = FrameDistributionSeq::<f64>::from_rows(&[vec![0.7, 0.1, 0.2], vec![0.4, 0.3, 0.3]]).unwrap();
        assert!((max_entropy_loss(&d) - max_entropy_loss(&p)).abs() < 1e-15);
    }

    #[test]
    fn mel_gradient_vanishes_at_uniform() {
        let mut params = ParamSet::new();
        let id = params.add("z", Grid::<f64>::filled(&[3, 4], 0.7)).unwrap();
        let mut tape = Tape::new();
        let z = tape.param(&params, id);
        let mel = max_entropy_node(&mut tape, z).unwrap();
        assert!(tape.value(mel).item().unwrap().abs() < 1e-12);
        tape.backward(mel, &mut params).unwrap();
        assert!(params.get(id).grad.values().iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn node_matches_direct_and_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let logits = Grid::<f64>::from_fn(&[5, 4], |_| rng.random_range(-3.0..3.0));
            let target = LabelSeq(vec![0, 2, 2]);
            let d = FrameDistributionSeq::from_logits(&logits).unwrap();
            let direct = combined_loss(&d, &target, 0.4).unwrap();
            let mut params = ParamSet::new();
            let id = params.add("z", logits).unwrap();
            let mut tape = Tape::new();
            let z = tape.param(&params, id);
            let (_, report) = combined_loss_node(&mut tape, z, &target, 0.4).unwrap().unwrap();
            assert!((report.total - direct.total).abs() < 1e-12);
            assert!((report.mel - direct.mel).abs() < 1e-12);

            let err = finite_difference_check(&mut params, id, 1e-5, |p: &ParamSet<f64>| {
                let mut tape = Tape::new();
                let z = tape.param(p, id);
                let (loss, _) = combined_loss_node(&mut tape, z, &target, 0.4)?.unwrap();
                Ok((tape, loss))
            })
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
