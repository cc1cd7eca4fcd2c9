use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optimizer::{clip_grad_norm, AdamW};
use crate::config::TrainConfig;
use crate::ctc::{FrameDistributionSeq, LabelSeq};
use crate::data::{normalize, DatasetSplit, FrameStack, SyntheticClip};
use crate::decoder::{beam_decode, greedy_decode, lm_fused_beam_decode, CharNGramModel};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_node, LossReport};
use crate::metrics::EvalReport;
use crate::model::{Mode, Model, ModelConfig, MotionPrior, PriorProvider};
use crate::numerics::{Grid, ParamId, Tape};
use crate::scalar::Real;

const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Normalized frames and motion priors for one clip.
pub fn prepare_clip<S: Real>(frames: &FrameStack, cfg: &ModelConfig) -> Result<(Grid<S>, Grid<S>)> {
    prepare_clip_with(frames, cfg, &MotionPrior)
}

pub fn prepare_clip_with<S: Real>(
    frames: &FrameStack,
    cfg: &ModelConfig,
    priors: &dyn PriorProvider<S>,
) -> Result<(Grid<S>, Grid<S>)> {
    let raw: Grid<S> = frames.to_grid();
    let p = priors.priors(&raw, cfg.feat_grid())?;
    Ok((normalize(&raw)?, p))
}

/// Eval-mode per-frame distribution for a clip.
pub fn clip_distribution<S: Real>(model: &Model<S>, frames: &FrameStack) -> Result<FrameDistributionSeq<S>> {
    let (x, p) = prepare_clip(frames, model.config())?;
    model.distribution(&x, &p)
}

#[derive(Clone, Copy)]
pub enum Decoder<'a> {
    Greedy,
    Beam { width: usize },
    BeamLm { width: usize, lm: &'a CharNGramModel, alpha: f64 },
}

impl Decoder<'_> {
    pub fn decode<S: Real>(&self, dist: &FrameDistributionSeq<S>) -> Result<LabelSeq> {
        match *self {
            Self::Greedy => Ok(greedy_decode(dist)),
            Self::Beam { width } => beam_decode(dist, width),
            Self::BeamLm { width, lm, alpha } => lm_fused_beam_decode(dist, width, lm, alpha),
        }
    }
}

/// Decodes every clip (in parallel) and scores it against its target.
pub fn evaluate<S: Real>(model: &Model<S>, clips: &[SyntheticClip], decoder: Decoder<'_>) -> Result<EvalReport> {
    let preds: Vec<Result<LabelSeq>> = clips
        .par_iter()
        .map(|clip| decoder.decode(&clip_distribution(model, &clip.frames)?))
        .collect();
    let mut report = EvalReport::default();
    for (clip, pred) in clips.iter().zip(preds) {
        report.push(clip.id.clone(), &pred?, &clip.target)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc_greedy: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.epoch, self.train_loss, self.dev_acc_greedy)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Parameters from the epoch with the best dev accuracy (ties keep the earlier epoch).
    pub best_model: Model<S>,
    pub final_model: Model<S>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub type EpochCallback<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where a non-finite batch is described before training aborts.
    pub dump_dir: Option<PathBuf>,
    pub on_epoch: Option<EpochCallback<'a>>,
}

struct ClipStep<S> {
    report: LossReport<S>,
    grads: Vec<(ParamId, Grid<S>)>,
}

fn clip_rng(seed: u64, epoch: usize, clip_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | clip_index as u64);
    rng
}

fn clip_step<S: Real>(
    model: &Model<S>,
    clip: &SyntheticClip,
    cfg: &TrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<Option<ClipStep<S>>> {
    let flip = rng.random_bool(cfg.flip_prob);
    let frames = if flip { clip.frames.mirrored() } else { clip.frames.clone() };
    let (x, p) = prepare_clip(&frames, model.config())?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &x, &p, &mut Mode::Train(&mut rng))?;
    let Some((loss, report)) = combined_loss_node(&mut tape, out.logits, &clip.target, S::lit(cfg.mel_weight))? else {
        return Ok(None);
    };
    if !report.total.is_finite() {
        return Ok(Some(ClipStep { report, grads: Vec::new() }));
    }
    Ok(Some(ClipStep {
        grads: tape.gradients(loss)?,
        report,
    }))
}

fn dump_batch<S: Real>(dir: Option<&Path>, epoch: usize, batch: &[&SyntheticClip], steps: &[Option<ClipStep<S>>], alphabet: &crate::ctc::Alphabet) -> String {
    let mut text = format!("non-finite loss in epoch {epoch}\nclip\ttarget\tframes\tctc\tmel\ttotal\n");
    for (clip, step) in batch.iter().zip(steps) {
        let (ctc, mel, total) = step
            .as_ref()
            .map(|s| (s.report.ctc.as_f64(), s.report.mel.as_f64(), s.report.total.as_f64()))
            .unwrap_or((f64::INFINITY, f64::NAN, f64::INFINITY));
        text.push_str(&format!(
            "{}\t{}\t{}\t{ctc}\t{mel}\t{total}\n",
            clip.id,
            alphabet.decode(&clip.target),
            clip.frames.frames()
        ));
    }
    match dir {
        Some(d) => {
            let path = d.join(format!("nan_batch_epoch{epoch}.tsv"));
            match std::fs::write(&path, &text) {
                Ok(()) => format!("batch dumped to {}", path.display()),
                Err(e) => format!("could not write dump ({e}): {}", text.replace('\n', "; ")),
            }
        }
        None => text.replace('\n', "; "),
    }
}

/// Minibatch training with seeded shuffling and augmentation. Each clip
/// builds its own graph (in parallel); gradients are merged in clip order.
pub fn train<S: Real>(
    model: Model<S>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Contract("training partition is empty".into()));
    }
    if split.alphabet.len() != model.config().num_classes {
        return Err(Error::Contract(format!(
            "model has {} classes but the dataset alphabet has {}",
            model.config().num_classes,
            split.alphabet.len()
        )));
    }
    let mut model = model;
    let mut optimizer = AdamW::new(cfg, model.params());
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<S>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SyntheticClip> = batch_idx.iter().map(|&i| &split.train[i]).collect();
            let steps: Vec<Option<ClipStep<S>>> = batch_idx
                .par_iter()
                .map(|&i| clip_step(&model, &split.train[i], cfg, clip_rng(cfg.seed, epoch, i)))
                .collect::<Result<_>>()?;
            if steps.iter().flatten().any(|s| !s.report.total.is_finite()) {
                let where_ = dump_batch(options.dump_dir.as_deref(), epoch, &batch, &steps, &split.alphabet);
                return Err(Error::NonFinite(format!("training loss is not finite; {where_}")));
            }
            let feasible: Vec<&ClipStep<S>> = steps.iter().flatten().collect();
            if feasible.is_empty() {
                continue;
            }
            let params = model.params_mut();
            params.zero_grad();
            for step in &feasible {
                params.accumulate(&step.grads)?;
                loss_sum += step.report.total.as_f64();
                counted += 1;
            }
            params.scale_grads(S::one() / S::lit(feasible.len() as f64));
            let norm = clip_grad_norm(params, S::lit(cfg.grad_clip));
            if !norm.is_finite() {
                let where_ = dump_batch(options.dump_dir.as_deref(), epoch, &batch, &steps, &split.alphabet);
                return Err(Error::NonFinite(format!("gradient norm is not finite; {where_}")));
            }
            optimizer.step(params);
        }
        let dev_acc_greedy = if split.dev.is_empty() {
            0.0
        } else {
            evaluate(&model, &split.dev, Decoder::Greedy)?.mean_letter_accuracy()
        };
        let record = EpochRecord {
            epoch,
            train_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            dev_acc_greedy,
        };
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&record);
        }
        log.push(record);
        if best.as_ref().is_none_or(|(acc, _, _)| dev_acc_greedy > *acc) {
            best = Some((dev_acc_greedy, epoch, model.clone()));
        }
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model.clone(), 0),
    };
    Ok(TrainOutcome {
        best_model,
        final_model: model,
        log,
        best_epoch,
    })
}
