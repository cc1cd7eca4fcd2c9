//! Per-frame spatial priors for the attention blend.

use crate::error::{contract, Result};
use crate::numerics::{pool_bins, Grid};
use crate::scalar::Real;

/// Supplies one normalized `[T, H, W]` prior stack for a clip.
pub trait PriorProvider<S: Real>: Send + Sync {
    fn priors(&self, frames: &Grid<S>, grid: (usize, usize)) -> Result<Grid<S>>;
}

/// Frame-difference motion magnitude, the default provider.
#[derive(Clone, Copy, Debug, Default)]
pub struct MotionPrior;

impl<S: Real> PriorProvider<S> for MotionPrior {
    fn priors(&self, frames: &Grid<S>, grid: (usize, usize)) -> Result<Grid<S>> {
        motion_prior(frames, grid)
    }
}

/// Priors computed elsewhere (for example from optical flow) and loaded as-is.
#[derive(Clone, Debug)]
pub struct PrecomputedPrior<S> {
    maps: Grid<S>,
}

impl<S: Real> PrecomputedPrior<S> {
    pub fn new(maps: Grid<S>) -> Result<Self> {
        if maps.ndim() != 3 {
            return contract(format!("prior maps of shape {:?}", maps.shape()));
        }
        Ok(Self { maps })
    }
}

impl<S: Real> PriorProvider<S> for PrecomputedPrior<S> {
    fn priors(&self, frames: &Grid<S>, grid: (usize, usize)) -> Result<Grid<S>> {
        let expect = [frames.dim(0), grid.0, grid.1];
        if self.maps.shape() != expect {
            return contract(format!(
                "precomputed priors {:?}, expected {expect:?}",
                self.maps.shape()
            ));
        }
        Ok(self.maps.clone())
    }
}

/// `|frame_t - frame_{t-1}|` summed over channels, box-averaged down to
/// `grid`, normalized to sum 1. Frame 0 and motionless frames get a uniform map.
pub fn motion_prior<S: Real>(frames: &Grid<S>, (gh, gw): (usize, usize)) -> Result<Grid<S>> {
    if frames.ndim() != 4 || frames.dim(0) == 0 {
        return contract(format!("frames of shape {:?}", frames.shape()));
    }
    let (t, c, h, w) = (frames.dim(0), frames.dim(1), frames.dim(2), frames.dim(3));
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return contract(format!("prior grid {gh}x{gw} for {h}x{w} frames"));
    }
    let rows = pool_bins(h, gh);
    let cols = pool_bins(w, gw);
    let plane = c * h * w;
    let uniform = S::one() / S::lit((gh * gw) as f64);
    let fv = frames.values();
    let mut out = Vec::with_capacity(t * gh * gw);
    for f in 0..t {
        if f == 0 {
            out.extend(std::iter::repeat_n(uniform, gh * gw));
            continue;
        }
        let (cur, prev) = (&fv[f * plane..(f + 1) * plane], &fv[(f - 1) * plane..f * plane]);
        let mut motion = vec![S::zero(); h * w];
        for ch in 0..c {
            for (i, m) in motion.iter_mut().enumerate() {
                *m += (cur[ch * h * w + i] - prev[ch * h * w + i]).abs();
            }
        }
        let mut cells = Vec::with_capacity(gh * gw);
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut acc = S::zero();
                for r in r0..r1 {
                    acc += motion[r * w + c0..r * w + c1].iter().copied().sum::<S>();
                }
                cells.push(acc / S::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
        let total: S = cells.iter().copied().sum();
        if total > S::zero() {
            out.extend(cells.into_iter().map(|v| v / total));
        } else {
            out.extend(std::iter::repeat_n(uniform, gh * gw));
        }
    }
    Grid::new(vec![t, gh, gw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_video_gives_uniform() {
        let frames = Grid::<f64>::filled(&[3, 3, 8, 8], 0.4);
        let p = motion_prior(&frames, (4, 4)).unwrap();
        assert!(p.values().iter().all(|&v| v == 1.0 / 16.0));
    }

    #[test]
    fn moving_square_concentrates_in_its_quadrant() {
        // a bright 2x2 square moves within the top-left quadrant of an 8x8 frame
        let mut frames = Grid::<f64>::zeros(&[2, 1, 8, 8]);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            frames.set(&[0, 0, r, c], 1.0);
        }
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            frames.set(&[1, 0, r, c], 1.0);
        }
        let p = motion_prior(&frames, (4, 4)).unwrap();
        // top-left quadrant of a 4x4 prior grid is cells (0..2, 0..2)
        let quad: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(r, c)| p.get(&[1, r, c]))
            .sum();
        assert!(quad > 0.5);
        assert!((quad - 1.0).abs() < 1e-12);
        let frame_sum: f64 = p.values()[16..].iter().sum();
        assert!((frame_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn precomputed_checks_shape() {
        let maps = Grid::<f64>::filled(&[2, 2, 2], 0.25);
        let provider = PrecomputedPrior::new(maps).unwrap();
        let frames = Grid::<f64>::zeros(&[2, 3, 4, 4]);
        assert!(provider.priors(&frames, (2, 2)).is_ok());
        assert!(provider.priors(&frames, (1, 1)).is_err());
    }
}
