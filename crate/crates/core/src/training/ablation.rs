use std::fmt;

use super::trainer::{evaluate, train, Decoder, TrainOptions};
use crate::config::RunConfig;
use crate::data::DatasetSplit;
use crate::decoder::lm_train;
use crate::error::{Error, Result};
use crate::model::Model;

/// One loss/augmentation setting, scored by three decoders and averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub mel_weight: f64,
    pub flip_prob: f64,
    pub greedy: f64,
    pub beam: f64,
    pub beam_lm: f64,
    /// Per-seed `[greedy, beam, beam_lm]` accuracies.
    pub per_seed: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>8} {:>8} {:>8}", "configuration", "greedy", "beam", "beam+lm")?;
        for r in &self.rows {
            writeln!(f, "{:<18} {:>8.4} {:>8.4} {:>8.4}", r.label, r.greedy, r.beam, r.beam_lm)?;
        }
        write!(f, "dev letter accuracy, mean over {} seed(s)", self.seeds.len())
    }
}

/// Trains the four settings `{CTC, +MEL, +flip, +MEL+flip}` for every seed and
/// scores each trained model on the dev partition. The MEL weight and flip
/// probability switched on are those of `base.train`.
pub fn ablate(split: &DatasetSplit, base: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if split.dev.is_empty() {
        return Err(Error::Contract("ablation scores the dev partition, which is empty".into()));
    }
    let t = &base.train;
    let targets: Vec<_> = split.train.iter().map(|c| c.target.clone()).collect();
    let lm = lm_train(&targets, &split.alphabet, t.lm_order, t.lm_smoothing)?;
    let settings = [
        ("CTC", 0.0, 0.0),
        ("CTC + MEL", t.mel_weight, 0.0),
        ("CTC + flip", 0.0, t.flip_prob),
        ("CTC + MEL + flip", t.mel_weight, t.flip_prob),
    ];
    let mut model_cfg = base.model.clone();
    model_cfg.num_classes = split.alphabet.len();
    let mut rows = Vec::new();
    for (label, mel_weight, flip_prob) in settings {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.train.clone();
            cfg.seed = seed;
            cfg.mel_weight = mel_weight;
            cfg.flip_prob = flip_prob;
            let model = Model::<f64>::new(model_cfg.clone(), seed)?;
            let trained = train(model, split, &cfg, TrainOptions::default())?.best_model;
            let score = |d| evaluate(&trained, &split.dev, d).map(|r| r.mean_letter_accuracy());
            per_seed.push([
                score(Decoder::Greedy)?,
                score(Decoder::Beam { width: cfg.beam_width })?,
                score(Decoder::BeamLm { width: cfg.beam_width, lm: &lm, alpha: cfg.lm_alpha })?,
            ]);
        }
        let n = per_seed.len() as f64;
        let mean = |k: usize| per_seed.iter().map(|s| s[k]).sum::<f64>() / n;
        rows.push(AblationRow {
            label,
            mel_weight,
            flip_prob,
            greedy: mean(0),
            beam: mean(1),
            beam_lm: mean(2),
            per_seed,
        });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}
