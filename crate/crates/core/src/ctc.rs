//! The CTC probability model: alignments, the collapse map, exhaustive
//! enumeration for small instances and the forward-backward loss.

use std::collections::BTreeMap;

use crate::error::{contract, Error, Result};
use crate::numerics::{log_sum_exp, softmax, Grid, Tape, Var};
use crate::scalar::Real;

/// Character used for the blank class when writing alignment paths as text.
pub const BLANK_CHAR: char = '-';

/// Ordered letters; the blank class takes index `len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    letters: Vec<char>,
}

impl Alphabet {
    pub fn new(letters: impl IntoIterator<Item = char>) -> Result<Self> {
        let letters: Vec<char> = letters.into_iter().collect();
        if letters.is_empty() {
            return contract("alphabet is empty");
        }
        for (i, &c) in letters.iter().enumerate() {
            if c == BLANK_CHAR || c == '·' || c.is_whitespace() || c.is_control() {
                return contract(format!("letter {c:?} is reserved"));
            }
            if letters[..i].contains(&c) {
                return contract(format!("duplicate letter {c:?}"));
            }
        }
        Ok(Self { letters })
    }

    /// Alphabet from the characters of a string, e.g. `"abcde"`.
    pub fn from_str_letters(s: &str) -> Result<Self> {
        Self::new(s.chars())
    }

    pub fn letters(&self) -> &[char] {
        &self.letters
    }

    /// Letter count `C`.
    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    /// Class count `C + 1`.
    pub fn num_classes(&self) -> usize {
        self.letters.len() + 1
    }

    pub fn blank(&self) -> usize {
        self.letters.len()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.letters.iter().position(|&l| l == c)
    }

    pub fn encode(&self, s: &str) -> Result<LabelSeq> {
        s.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Contract(format!("letter {c:?} not in alphabet")))
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelSeq)
    }

    pub fn decode(&self, labels: &LabelSeq) -> String {
        labels.0.iter().map(|&i| self.letters[i]).collect()
    }

    /// Parses an alignment written with [`BLANK_CHAR`] for blanks, e.g. `"aa-ss-l"`.
    pub fn parse_path(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| {
                if c == BLANK_CHAR {
                    Ok(self.blank())
                } else {
                    self.index_of(c)
                        .ok_or_else(|| Error::Contract(format!("symbol {c:?} not in alphabet")))
                }
            })
            .collect()
    }

    pub fn as_string(&self) -> String {
        self.letters.iter().collect()
    }
}

/// A blank-free sequence of letter indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSeq(pub Vec<usize>);

impl LabelSeq {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Minimum number of frames any alignment of this sequence needs:
    /// one per letter plus one separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Per-frame class probabilities, `T x C'`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDistributionSeq<S> {
    probs: Grid<S>,
}

impl<S: Real> FrameDistributionSeq<S> {
    /// Validates that every row is a probability vector (sums to 1 within 1e-9).
    pub fn new(probs: Grid<S>) -> Result<Self> {
        if probs.ndim() != 2 || probs.dim(1) < 2 {
            return contract(format!("distribution shape {:?}", probs.shape()));
        }
        let tol = S::lit(1e-9);
        for t in 0..probs.dim(0) {
            let row = probs.row(t);
            if row.iter().any(|&p| !(p >= S::zero() && p <= S::one())) {
                return contract(format!("frame {t} has entries outside [0, 1]"));
            }
            if (row.iter().copied().sum::<S>() - S::one()).abs() > tol {
                return contract(format!("frame {t} does not sum to 1"));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        Self::new(Grid::from_rows(rows)?)
    }

    /// Row-wise softmax of `T x C'` logits.
    pub fn from_logits(logits: &Grid<S>) -> Result<Self> {
        if logits.ndim() != 2 {
            return contract("logits must be 2-D");
        }
        Self::new(softmax(logits, 1)?)
    }

    pub fn frames(&self) -> usize {
        self.probs.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.probs.dim(1)
    }

    pub fn blank(&self) -> usize {
        self.classes() - 1
    }

    pub fn prob(&self, t: usize, k: usize) -> S {
        self.probs.values()[t * self.classes() + k]
    }

    pub fn row(&self, t: usize) -> &[S] {
        self.probs.row(t)
    }

    pub fn grid(&self) -> &Grid<S> {
        &self.probs
    }

    /// Natural-log probabilities; zero maps to negative infinity.
    pub fn log_probs(&self) -> Grid<S> {
        self.probs.map(|p| p.ln())
    }
}

/// Probability of one alignment path: the product of the chosen per-frame entries.
pub fn alignment_probability<S: Real>(dist: &FrameDistributionSeq<S>, path: &[usize]) -> Result<S> {
    if path.len() != dist.frames() {
        return contract(format!(
            "path of length {} for {} frames",
            path.len(),
            dist.frames()
        ));
    }
    let mut logp = S::zero();
    for (t, &k) in path.iter().enumerate() {
        if k >= dist.classes() {
            return contract(format!("class {k} out of range"));
        }
        logp += dist.prob(t, k).ln();
    }
    Ok(logp.exp())
}

/// The many-to-one map from alignments to label sequences: merge adjacent
/// repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> LabelSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSeq(out)
}

/// Largest path space the exhaustive routines will enumerate.
pub const BRUTEFORCE_LIMIT: u64 = 10_000_000;

fn check_enumerable<S: Real>(dist: &FrameDistributionSeq<S>) -> Result<()> {
    let count = (dist.classes() as u64).checked_pow(dist.frames() as u32);
    match count {
        Some(n) if n <= BRUTEFORCE_LIMIT => Ok(()),
        _ => Err(Error::TooLarge(format!(
            "{}^{} alignment paths exceeds {}",
            dist.classes(),
            dist.frames(),
            BRUTEFORCE_LIMIT
        ))),
    }
}

/// Visits every path in `C'^T` with its probability (plain products, ascending
/// lexicographic path order).
fn for_each_path<S: Real>(dist: &FrameDistributionSeq<S>, mut visit: impl FnMut(&[usize], S)) {
    let t_len = dist.frames();
    let c = dist.classes();
    let mut path = vec![0usize; t_len];
    loop {
        let mut p = S::one();
        for (t, &k) in path.iter().enumerate() {
            p *= dist.prob(t, k);
        }
        visit(&path, p);
        let mut ax = t_len;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            path[ax] += 1;
            if path[ax] < c {
                break;
            }
            path[ax] = 0;
        }
    }
}

/// `p(target | dist)` by summing over every alignment that collapses to `target`.
pub fn sequence_probability_bruteforce<S: Real>(
    dist: &FrameDistributionSeq<S>,
    target: &LabelSeq,
) -> Result<S> {
    check_enumerable(dist)?;
    if target.len() > dist.frames() {
        return Ok(S::zero());
    }
    let blank = dist.blank();
    let mut total = S::zero();
    for_each_path(dist, |path, p| {
        if collapse(path, blank) == *target {
            total += p;
        }
    });
    Ok(total)
}

/// Posterior mass of every label sequence reachable from `dist`, by enumeration.
pub fn label_posteriors_bruteforce<S: Real>(
    dist: &FrameDistributionSeq<S>,
) -> Result<BTreeMap<LabelSeq, S>> {
    check_enumerable(dist)?;
    let blank = dist.blank();
    let mut out = BTreeMap::new();
    for_each_path(dist, |path, p| {
        *out.entry(collapse(path, blank)).or_insert(S::zero()) += p;
    });
    Ok(out)
}

/// Value of the CTC loss together with the feasibility flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss<S> {
    /// `-ln p(target | dist)`; `+inf` when the target cannot be produced.
    pub value: S,
    /// False when the target needs more frames than are available.
    pub feasible: bool,
}

fn validate_target(target: &LabelSeq, blank: usize) -> Result<()> {
    if let Some(&bad) = target.0.iter().find(|&&l| l >= blank) {
        return contract(format!("target label {bad} is blank or out of range"));
    }
    Ok(())
}

/// Forward and backward log-lattices over the blank-augmented target.
struct Lattice<S> {
    ext: Vec<usize>,
    alpha: Vec<S>,
    beta: Vec<S>,
    log_likelihood: S,
}

fn lattice<S: Real>(logp: &Grid<S>, target: &LabelSeq) -> Lattice<S> {
    let t_len = logp.dim(0);
    let c = logp.dim(1);
    let blank = c - 1;
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in &target.0 {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| logp.values()[t * c + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = S::neg_infinity();

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    let mut terms = Vec::with_capacity(3);
    for t in 1..t_len {
        for s in 0..s_len {
            terms.clear();
            terms.push(alpha[(t - 1) * s_len + s]);
            if s >= 1 {
                terms.push(alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                terms.push(alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = log_sum_exp(&terms).unwrap() + lp(t, ext[s]);
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = S::zero();
    if s_len > 1 {
        beta[last + s_len - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            terms.clear();
            let next = (t + 1) * s_len;
            terms.push(beta[next + s] + lp(t + 1, ext[s]));
            if s + 1 < s_len {
                terms.push(beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                terms.push(beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = log_sum_exp(&terms).unwrap();
        }
    }

    let mut fin = vec![alpha[last + s_len - 1]];
    if s_len > 1 {
        fin.push(alpha[last + s_len - 2]);
    }
    let log_likelihood = log_sum_exp(&fin).unwrap();
    Lattice {
        ext,
        alpha,
        beta,
        log_likelihood,
    }
}

/// `-ln p(target | dist)` by the forward recursion in log domain.
pub fn ctc_loss<S: Real>(dist: &FrameDistributionSeq<S>, target: &LabelSeq) -> Result<CtcLoss<S>> {
    validate_target(target, dist.blank())?;
    if target.min_frames() > dist.frames() {
        return Ok(CtcLoss {
            value: S::infinity(),
            feasible: false,
        });
    }
    let lat = lattice(&dist.log_probs(), target);
    Ok(CtcLoss {
        value: -lat.log_likelihood,
        feasible: true,
    })
}

/// CTC loss of `softmax(logits)` and its gradient with respect to the logits,
/// `y - gamma` where `gamma` is the per-frame soft-alignment posterior.
/// The gradient is `None` when the loss is infinite.
pub fn ctc_loss_with_logit_grad<S: Real>(
    logits: &Grid<S>,
    target: &LabelSeq,
) -> Result<(CtcLoss<S>, Option<Grid<S>>)> {
    let dist = FrameDistributionSeq::from_logits(logits)?;
    let loss = ctc_loss(&dist, target)?;
    if !loss.value.is_finite() {
        return Ok((loss, None));
    }
    let t_len = dist.frames();
    let c = dist.classes();
    // log-softmax computed directly keeps tiny probabilities finite
    let mut logp = Vec::with_capacity(t_len * c);
    for t in 0..t_len {
        let row = logits.row(t);
        let lse = log_sum_exp(row)?;
        logp.extend(row.iter().map(|&z| z - lse));
    }
    let logp = Grid::new(vec![t_len, c], logp)?;
    let lat = lattice(&logp, target);
    let s_len = lat.ext.len();
    let mut grad = dist.grid().clone();
    for t in 0..t_len {
        for s in 0..s_len {
            let w = lat.alpha[t * s_len + s] + lat.beta[t * s_len + s] - lat.log_likelihood;
            if w > S::neg_infinity() {
                grad.values_mut()[t * c + lat.ext[s]] -= w.exp();
            }
        }
    }
    let loss = CtcLoss {
        value: -lat.log_likelihood,
        feasible: true,
    };
    Ok((loss, Some(grad)))
}

/// Attaches the CTC loss of `logits [T, C']` to a tape. Returns `None` for
/// targets that cannot be aligned (infinite loss), which callers skip.
pub fn ctc_loss_node<S: Real>(tape: &mut Tape<S>, logits: Var, target: &LabelSeq) -> Result<Option<Var>> {
    let (loss, grad) = ctc_loss_with_logit_grad(tape.value(logits), target)?;
    match grad {
        Some(g) => tape.custom_scalar(logits, loss.value, g).map(Some),
        None => Ok(None),
    }
}
