//! Character-level n-gram language model with additive smoothing and
//! context-shortening backoff.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::ctc::{Alphabet, LabelSeq};
use crate::error::{contract, Error, Result};

/// Written for the end-of-sequence token in the text format.
pub const EOS_TOKEN: &str = "</s>";
/// Written for the empty context in the text format.
pub const EMPTY_CONTEXT: &str = "·";
const HEADER_TAG: &str = "CHARLM v1";

/// Conditional next-letter counts for every context of length `0..=order`.
///
/// Tokens are letter indices, with `alphabet.len()` standing for end of sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CharNGramModel {
    order: usize,
    smoothing_alpha: f64,
    alphabet: Alphabet,
    counts: BTreeMap<Vec<usize>, BTreeMap<usize, u64>>,
}

/// Counts every `(context, next)` pair with contexts of length `0..=order`.
/// The first letter of a word only sees the empty context (marginal table).
pub fn lm_train(
    corpus: &[LabelSeq],
    alphabet: &Alphabet,
    order: usize,
    smoothing_alpha: f64,
) -> Result<CharNGramModel> {
    if corpus.is_empty() {
        return contract("language model corpus is empty");
    }
    if order < 1 {
        return contract("language model order must be >= 1");
    }
    if !(smoothing_alpha > 0.0 && smoothing_alpha.is_finite()) {
        return contract("smoothing alpha must be positive");
    }
    let eos = alphabet.len();
    let mut counts: BTreeMap<Vec<usize>, BTreeMap<usize, u64>> = BTreeMap::new();
    let marginal = counts.entry(Vec::new()).or_default();
    for l in 0..=eos {
        marginal.entry(l).or_insert(0);
    }
    for word in corpus {
        if word.0.iter().any(|&l| l >= eos) {
            return contract("corpus label outside alphabet");
        }
        let tokens: Vec<usize> = word.0.iter().copied().chain([eos]).collect();
        for (i, &next) in tokens.iter().enumerate() {
            for j in 0..=order.min(i) {
                let ctx = word.0[i - j..i].to_vec();
                *counts.entry(ctx).or_default().entry(next).or_insert(0) += 1;
            }
        }
    }
    Ok(CharNGramModel {
        order,
        smoothing_alpha,
        alphabet: alphabet.clone(),
        counts,
    })
}

impl CharNGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_alpha(&self) -> f64 {
        self.smoothing_alpha
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    /// Token index of the end-of-sequence marker.
    pub fn eos(&self) -> usize {
        self.alphabet.len()
    }

    /// Vocabulary size: letters plus the end marker.
    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + 1
    }

    pub fn count(&self, context: &[usize], next: usize) -> u64 {
        self.counts
            .get(context)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0)
    }

    fn total(&self, context: &[usize]) -> u64 {
        self.counts.get(context).map_or(0, |m| m.values().sum())
    }

    /// Longest suffix of `history` (at most `order` letters) with stored counts.
    pub fn backoff_context<'a>(&self, history: &'a [usize]) -> &'a [usize] {
        let n = history.len().min(self.order);
        for j in (1..=n).rev() {
            let ctx = &history[history.len() - j..];
            if self.total(ctx) > 0 {
                return ctx;
            }
        }
        &history[..0]
    }

    /// `P(next | history)` with additive smoothing on the backed-off context.
    pub fn prob(&self, history: &[usize], next: usize) -> f64 {
        let ctx = self.backoff_context(history);
        let c = self.count(ctx, next) as f64;
        let total = self.total(ctx) as f64;
        (c + self.smoothing_alpha) / (total + self.smoothing_alpha * self.vocab_size() as f64)
    }

    /// Stored contexts in ascending order.
    pub fn contexts(&self) -> impl Iterator<Item = &[usize]> {
        self.counts.keys().map(Vec::as_slice)
    }

    fn token_str(&self, t: usize) -> String {
        if t == self.eos() {
            EOS_TOKEN.to_string()
        } else {
            self.alphabet.letters()[t].to_string()
        }
    }

    /// Writes the versioned text format. The empty context lists every letter
    /// (zero counts included), in alphabet order, so the vocabulary is recoverable.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "{HEADER_TAG} order={} alpha={}",
            self.order, self.smoothing_alpha
        )?;
        for (ctx, nexts) in &self.counts {
            let ctx_str = if ctx.is_empty() {
                EMPTY_CONTEXT.to_string()
            } else {
                ctx.iter().map(|&l| self.alphabet.letters()[l]).collect()
            };
            for (&next, &count) in nexts {
                writeln!(w, "{ctx_str}\t{}\t{count}", self.token_str(next))?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty language model file".into()))??;
        let (order, smoothing_alpha) = parse_header(&header)?;
        let mut raw: Vec<(String, String, u64)> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [ctx, next, count] = parts[..] else {
                return Err(Error::Format(format!("line {}: expected 3 fields", n + 2)));
            };
            let count = count
                .parse::<u64>()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
            raw.push((ctx.to_string(), next.to_string(), count));
        }
        let letters: Vec<char> = raw
            .iter()
            .filter(|(ctx, next, _)| ctx == EMPTY_CONTEXT && next != EOS_TOKEN)
            .map(|(_, next, _)| {
                let mut cs = next.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::Format(format!("bad letter token {next:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        let alphabet = Alphabet::new(letters)?;
        let eos = alphabet.len();
        let mut counts: BTreeMap<Vec<usize>, BTreeMap<usize, u64>> = BTreeMap::new();
        for (ctx, next, count) in raw {
            let ctx_ids = if ctx == EMPTY_CONTEXT {
                Vec::new()
            } else {
                alphabet.encode(&ctx)?.0
            };
            if ctx_ids.len() > order {
                return Err(Error::Format(format!("context {ctx:?} longer than order")));
            }
            let next_id = if next == EOS_TOKEN {
                eos
            } else {
                let ids = alphabet.encode(&next)?.0;
                if ids.len() != 1 {
                    return Err(Error::Format(format!("bad token {next:?}")));
                }
                ids[0]
            };
            counts.entry(ctx_ids).or_default().insert(next_id, count);
        }
        Ok(Self {
            order,
            smoothing_alpha,
            alphabet,
            counts,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn parse_header(line: &str) -> Result<(usize, f64)> {
    let rest = line
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| Error::Format(format!("bad header {line:?}")))?;
    let mut order = None;
    let mut alpha = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("order=") {
            order = v.parse::<usize>().ok();
        } else if let Some(v) = field.strip_prefix("alpha=") {
            alpha = v.parse::<f64>().ok();
        }
    }
    match (order, alpha) {
        (Some(o), Some(a)) if o >= 1 && a > 0.0 => Ok((o, a)),
        _ => Err(Error::Format(format!("bad header {line:?}"))),
    }
}
