//! Synthetic fingerspelling clips: one asymmetric glyph per letter, drawn at a
//! signer-specific drifting position with blended transition frames.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::ctc::{Alphabet, LabelSeq};
use crate::error::{contract, Error, Result};
use crate::numerics::Grid;
use crate::scalar::Real;

/// Minimum fraction of cells in which two glyphs (or a glyph and a mirror) differ.
pub const GLYPH_SEPARATION: f64 = 0.4;
const GLYPH_SEED: u64 = 0x5EED_61F5;
const SIGNER_STREAM_BASE: u64 = 1 << 40;
pub const CHANNELS: usize = 3;

/// Generator settings (the `[data]` config section).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub alphabet: String,
    pub frame_height: usize,
    pub frame_width: usize,
    pub min_letters: usize,
    pub max_letters: usize,
    /// Frames each letter is held for, drawn uniformly from `min_hold..=max_hold`.
    pub min_hold: usize,
    pub max_hold: usize,
    pub transition_frames: usize,
    pub glyph_cells: usize,
    pub cell_pixels: usize,
    pub signers: usize,
    pub left_handed_prob: f64,
    /// Train, dev and test fractions.
    pub split: [f64; 3],
    pub signer_disjoint: bool,
    /// Letter sampling weights; empty means uniform.
    pub letter_weights: Vec<f64>,
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            alphabet: "abcde".into(),
            frame_height: 64,
            frame_width: 64,
            min_letters: 2,
            max_letters: 4,
            min_hold: 2,
            max_hold: 3,
            transition_frames: 1,
            glyph_cells: 5,
            cell_pixels: 6,
            signers: 100,
            left_handed_prob: 0.07,
            split: [0.7, 0.15, 0.15],
            signer_disjoint: true,
            letter_weights: Vec::new(),
            noise: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, alphabet: &Alphabet) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("data.{m}")));
        if alphabet.len() < 2 {
            return fail("alphabet needs at least 2 letters");
        }
        if self.min_letters == 0 || self.min_letters > self.max_letters {
            return fail("min_letters must be in 1..=max_letters");
        }
        if self.min_hold < 2 || self.min_hold > self.max_hold {
            return fail("min_hold must be >= 2 and <= max_hold");
        }
        if self.glyph_cells < 3 || self.cell_pixels == 0 {
            return fail("glyph_cells must be >= 3 and cell_pixels >= 1");
        }
        let glyph = self.glyph_cells * self.cell_pixels;
        if glyph + 2 > self.frame_height.min(self.frame_width) {
            return fail("glyph does not fit in the frame");
        }
        if !(0.0..=1.0).contains(&self.left_handed_prob) {
            return fail("left_handed_prob must be in [0, 1]");
        }
        if self.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("split fractions must be in [0, 1] and sum to 1");
        }
        let needed = self.split.iter().filter(|&&f| f > 0.0).count();
        if self.signers < needed.max(1) {
            return fail("signers must cover every non-empty partition");
        }
        if !self.letter_weights.is_empty()
            && (self.letter_weights.len() != alphabet.len()
                || self.letter_weights.iter().any(|&w| !(w >= 0.0 && w.is_finite()))
                || self.letter_weights.iter().sum::<f64>() <= 0.0)
        {
            return fail("letter_weights must be one non-negative weight per letter");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be >= 0");
        }
        Ok(())
    }

    /// Partition sizes `round(n * f)` for train and dev; test takes the rest.
    pub fn partition_sizes(&self, n_clips: usize) -> [usize; 3] {
        let train = ((n_clips as f64) * self.split[0]).round() as usize;
        let dev = (((n_clips as f64) * self.split[1]).round() as usize).min(n_clips - train.min(n_clips));
        let train = train.min(n_clips);
        [train, dev, n_clips - train - dev]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Handedness {
    Left,
    Right,
}

impl Handedness {
    pub fn toggled(self) -> Self {
        match self {
            Self::Left => Self::Right,
            Self::Right => Self::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            _ => Err(Error::Format(format!("bad handedness {s:?}"))),
        }
    }
}

/// `[T, channels, H, W]` frames quantized to bytes; byte `k` is the real `k / 255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStack {
    shape: [usize; 4],
    bytes: Vec<u8>,
}

impl FrameStack {
    pub fn new(shape: [usize; 4], bytes: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != bytes.len() {
            return contract(format!("{} bytes for frames {shape:?}", bytes.len()));
        }
        Ok(Self { shape, bytes })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Frames as reals in `[0, 1]`.
    pub fn to_grid<S: Real>(&self) -> Grid<S> {
        let values = self.bytes.iter().map(|&k| S::lit(super::container::byte_to_unit(k))).collect();
        Grid::new(self.shape.to_vec(), values).expect("shape checked at construction")
    }

    /// Every frame mirrored about its vertical axis.
    pub fn mirrored(&self) -> Self {
        let w = self.shape[3];
        let mut bytes = self.bytes.clone();
        for row in bytes.chunks_mut(w) {
            row.reverse();
        }
        Self { shape: self.shape, bytes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub frames: FrameStack,
    pub target: LabelSeq,
    pub signer_id: usize,
    pub handedness: Handedness,
}

/// Mirrors every frame, keeps the target, toggles handedness.
pub fn horizontal_flip(clip: &SyntheticClip) -> SyntheticClip {
    SyntheticClip {
        frames: clip.frames.mirrored(),
        handedness: clip.handedness.toggled(),
        ..clip.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub alphabet: Alphabet,
    pub train: Vec<SyntheticClip>,
    pub dev: Vec<SyntheticClip>,
    pub test: Vec<SyntheticClip>,
    pub signer_disjoint: bool,
}

impl DatasetSplit {
    pub fn partitions(&self) -> [(&'static str, &[SyntheticClip]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    /// True when some signer appears in two partitions.
    pub fn has_signer_overlap(&self) -> bool {
        let sets: Vec<std::collections::BTreeSet<usize>> = self
            .partitions()
            .iter()
            .map(|(_, clips)| clips.iter().map(|c| c.signer_id).collect())
            .collect();
        (0..3).any(|i| (i + 1..3).any(|j| !sets[i].is_disjoint(&sets[j])))
    }
}

pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel `(x - mean) / std` on `[T, 3, H, W]` frames.
pub fn normalize<S: Real>(frames: &Grid<S>) -> Result<Grid<S>> {
    if frames.ndim() != 4 || frames.dim(1) != CHANNELS {
        return contract(format!("normalize needs [T, 3, H, W], got {:?}", frames.shape()));
    }
    let plane = frames.dim(2) * frames.dim(3);
    let mut out = frames.clone();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        let ch = (i / plane) % CHANNELS;
        *v = (*v - S::lit(NORM_MEAN[ch])) / S::lit(NORM_STD[ch]);
    }
    Ok(out)
}

/// Square binary glyphs, one per letter. Every glyph differs from itself
/// mirrored, and from every other glyph and its mirror, in at least
/// `GLYPH_SEPARATION` of its cells (relaxed only if the grid is too small).
pub fn glyph_set(letters: usize, cells: usize) -> Vec<Vec<bool>> {
    let mirror = |g: &[bool]| -> Vec<bool> {
        g.chunks(cells).flat_map(|row| row.iter().rev().copied()).collect()
    };
    let dist = |a: &[bool], b: &[bool]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    let area = cells * cells;
    let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED);
    let mut glyphs: Vec<Vec<bool>> = Vec::with_capacity(letters);
    let mut sep = ((area as f64 * GLYPH_SEPARATION) as usize).max(1);
    let mut misses = 0;
    while glyphs.len() < letters {
        let g: Vec<bool> = (0..area).map(|_| rng.random_bool(0.5)).collect();
        let filled = g.iter().filter(|&&b| b).count();
        let m = mirror(&g);
        let ok = filled * 10 >= area * 4
            && filled * 10 <= area * 7
            && dist(&g, &m) >= sep
            && glyphs.iter().all(|o| dist(o, &g) >= sep && dist(o, &m) >= sep);
        if ok {
            glyphs.push(g);
        } else {
            misses += 1;
            if misses == 20_000 && sep > 1 {
                sep -= 1;
                misses = 0;
            }
        }
    }
    glyphs
}

#[derive(Clone, Debug)]
struct SignerStyle {
    offset: (f64, f64),
    drift: (f64, f64),
    scale: f64,
    contrast: f64,
    background: f64,
    tint: [f64; 3],
}

fn signer_style(seed: u64, signer: usize) -> SignerStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SIGNER_STREAM_BASE + signer as u64);
    SignerStyle {
        offset: (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)),
        drift: (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
        scale: rng.random_range(0.8..1.1),
        contrast: rng.random_range(0.55..0.9),
        background: rng.random_range(0.05..0.3),
        tint: [
            rng.random_range(0.7..1.0),
            rng.random_range(0.7..1.0),
            rng.random_range(0.7..1.0),
        ],
    }
}

/// Signer ids available to each partition.
fn signer_pools(cfg: &GenConfig) -> [Vec<usize>; 3] {
    if !cfg.signer_disjoint {
        let all: Vec<usize> = (0..cfg.signers).collect();
        return [all.clone(), all.clone(), all];
    }
    let n = cfg.signers;
    let want = |f: f64| if f > 0.0 { ((n as f64 * f).round() as usize).max(1) } else { 0 };
    let dev = want(cfg.split[1]);
    let test = want(cfg.split[2]);
    let train = n.saturating_sub(dev + test).max(usize::from(cfg.split[0] > 0.0));
    let (dev, test) = if train + dev + test > n {
        // shrink the larger held-out pool so every partition keeps a signer
        if dev >= test { (dev - 1, test) } else { (dev, test - 1) }
    } else {
        (dev, test)
    };
    [
        (0..train).collect(),
        (train..train + dev).collect(),
        (train + dev..train + dev + test).collect(),
    ]
}

struct Renderer<'a> {
    cfg: &'a GenConfig,
    glyphs: &'a [Vec<bool>],
}

impl Renderer<'_> {
    /// Noise-free frame `[3, H, W]` of one glyph at frame index `t`.
    fn glyph_frame(&self, style: &SignerStyle, letter: usize, t: usize) -> Vec<f64> {
        let (h, w) = (self.cfg.frame_height, self.cfg.frame_width);
        let cells = self.cfg.glyph_cells;
        let cell = self.cfg.cell_pixels as f64 * style.scale;
        let size = cell * cells as f64;
        let place = |extent: usize, off: f64, drift: f64| {
            let free = extent as f64 - size;
            (free / 2.0 + off + drift * t as f64).clamp(0.0, free.max(0.0))
        };
        let y0 = place(h, style.offset.1, style.drift.1);
        let x0 = place(w, style.offset.0, style.drift.0);
        let glyph = &self.glyphs[letter];
        let mut out = vec![0.0; CHANNELS * h * w];
        for r in 0..h {
            let gr = ((r as f64 + 0.5 - y0) / cell).floor();
            for c in 0..w {
                let gc = ((c as f64 + 0.5 - x0) / cell).floor();
                let on = gr >= 0.0
                    && gc >= 0.0
                    && (gr as usize) < cells
                    && (gc as usize) < cells
                    && glyph[gr as usize * cells + gc as usize];
                for ch in 0..CHANNELS {
                    out[(ch * h + r) * w + c] = style.background
                        + if on { style.contrast * style.tint[ch] } else { 0.0 };
                }
            }
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic dataset generation; clip `i` draws from its own random stream.
pub fn synthesize(seed: u64, n_clips: usize, alphabet: &Alphabet, cfg: &GenConfig) -> Result<DatasetSplit> {
    cfg.validate(alphabet)?;
    let glyphs = glyph_set(alphabet.len(), cfg.glyph_cells);
    let renderer = Renderer { cfg, glyphs: &glyphs };
    let pools = signer_pools(cfg);
    let sizes = cfg.partition_sizes(n_clips);
    let weights = if cfg.letter_weights.is_empty() {
        vec![1.0; alphabet.len()]
    } else {
        cfg.letter_weights.clone()
    };
    let letter_dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let names = ["train", "dev", "test"];

    let mut parts: [Vec<SyntheticClip>; 3] = Default::default();
    let mut index = 0usize;
    for (p, &size) in sizes.iter().enumerate() {
        for local in 0..size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            index += 1;
            let pool = &pools[p];
            let signer_id = pool[rng.random_range(0..pool.len())];
            let style = signer_style(seed, signer_id);
            let k = rng.random_range(cfg.min_letters..=cfg.max_letters);
            let letters: Vec<usize> = (0..k).map(|_| letter_dist.sample(&mut rng)).collect();
            let handedness = if rng.random_bool(cfg.left_handed_prob) {
                Handedness::Left
            } else {
                Handedness::Right
            };

            let mut frames: Vec<Vec<f64>> = Vec::new();
            for (i, &letter) in letters.iter().enumerate() {
                if i > 0 {
                    for _ in 0..cfg.transition_frames {
                        let t = frames.len();
                        let a = renderer.glyph_frame(&style, letters[i - 1], t);
                        // a repeated letter is released and re-formed
                        let b = if letters[i - 1] == letter {
                            vec![style.background; a.len()]
                        } else {
                            renderer.glyph_frame(&style, letter, t)
                        };
                        frames.push(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect());
                    }
                }
                let hold = rng.random_range(cfg.min_hold..=cfg.max_hold);
                for _ in 0..hold {
                    let t = frames.len();
                    frames.push(renderer.glyph_frame(&style, letter, t));
                }
            }
            let t = frames.len();
            let bytes: Vec<u8> = frames
                .into_iter()
                .flatten()
                .map(|v| {
                    let jitter = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    quantize(v + jitter)
                })
                .collect();
            let mut stack = FrameStack::new([t, CHANNELS, cfg.frame_height, cfg.frame_width], bytes)?;
            if handedness == Handedness::Left {
                stack = stack.mirrored();
            }
            parts[p].push(SyntheticClip {
                id: format!("{}_{local:05}", names[p]),
                frames: stack,
                target: LabelSeq(letters),
                signer_id,
                handedness,
            });
        }
    }
    let [train, dev, test] = parts;
    Ok(DatasetSplit {
        alphabet: alphabet.clone(),
        train,
        dev,
        test,
        signer_disjoint: cfg.signer_disjoint,
    })
}
