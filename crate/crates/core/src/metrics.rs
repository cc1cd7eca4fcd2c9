//! Letter accuracy from minimum edit distance, and evaluation reports.

use std::fmt;

use crate::ctc::LabelSeq;
use crate::error::{contract, Result};

/// Edit operation counts turning `truth` into `pred`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn cost(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.cost(), self.insertions, self.deletions)
    }
}

/// Unit-cost Levenshtein alignment. Among equal-cost alignments, fewer
/// insertions win, then fewer deletions.
pub fn edit_alignment(pred: &LabelSeq, truth: &LabelSeq) -> EditCounts {
    let (p, t) = (pred.as_slice(), truth.as_slice());
    let mut prev: Vec<EditCounts> = (0..=t.len())
        .map(|j| EditCounts { deletions: j, ..Default::default() })
        .collect();
    for i in 1..=p.len() {
        let mut cur = vec![EditCounts { insertions: i, ..Default::default() }];
        for j in 1..=t.len() {
            let mut diag = prev[j - 1];
            if p[i - 1] != t[j - 1] {
                diag.substitutions += 1;
            }
            let mut ins = prev[j];
            ins.insertions += 1;
            let mut del = cur[j - 1];
            del.deletions += 1;
            let best = [diag, ins, del]
                .into_iter()
                .min_by_key(EditCounts::key)
                .unwrap_or(diag);
            cur.push(best);
        }
        prev = cur;
    }
    prev[t.len()]
}

/// `max(0, 1 - (S + D + I) / N)` with `N = |truth|`.
pub fn letter_accuracy(pred: &LabelSeq, truth: &LabelSeq) -> Result<f64> {
    if truth.is_empty() {
        return contract("letter accuracy needs a non-empty reference");
    }
    let cost = edit_alignment(pred, truth).cost() as f64;
    Ok((1.0 - cost / truth.len() as f64).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipScore {
    pub clip_id: String,
    pub accuracy: f64,
    pub counts: EditCounts,
    pub reference_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub per_clip: Vec<ClipScore>,
}

impl EvalReport {
    pub fn push(&mut self, clip_id: impl Into<String>, pred: &LabelSeq, truth: &LabelSeq) -> Result<()> {
        let accuracy = letter_accuracy(pred, truth)?;
        self.per_clip.push(ClipScore {
            clip_id: clip_id.into(),
            accuracy,
            counts: edit_alignment(pred, truth),
            reference_len: truth.len(),
        });
        Ok(())
    }

    /// Unweighted mean of per-clip accuracies (the headline number).
    pub fn mean_letter_accuracy(&self) -> f64 {
        if self.per_clip.is_empty() {
            return 0.0;
        }
        self.per_clip.iter().map(|c| c.accuracy).sum::<f64>() / self.per_clip.len() as f64
    }

    pub fn totals(&self) -> (EditCounts, usize) {
        self.per_clip.iter().fold((EditCounts::default(), 0), |(mut acc, n), c| {
            acc.substitutions += c.counts.substitutions;
            acc.deletions += c.counts.deletions;
            acc.insertions += c.counts.insertions;
            (acc, n + c.reference_len)
        })
    }

    /// Corpus-pooled accuracy `max(0, 1 - total errors / total N)`.
    pub fn pooled_letter_accuracy(&self) -> f64 {
        let (counts, n) = self.totals();
        if n == 0 {
            return 0.0;
        }
        (1.0 - counts.cost() as f64 / n as f64).max(0.0)
    }

    /// One `clip_id\taccuracy\tS\tD\tI\tN` line per clip.
    pub fn to_lines(&self) -> String {
        self.per_clip
            .iter()
            .map(|c| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    c.clip_id,
                    c.accuracy,
                    c.counts.substitutions,
                    c.counts.deletions,
                    c.counts.insertions,
                    c.reference_len
                )
            })
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .per_clip
            .iter()
            .map(|c| c.clip_id.len())
            .max()
            .unwrap_or(4)
            .max(4);
        writeln!(f, "{:<width$}  {:>8}  {:>3}  {:>3}  {:>3}  {:>3}", "clip", "accuracy", "S", "D", "I", "N")?;
        for c in &self.per_clip {
            writeln!(
                f,
                "{:<width$}  {:>8.4}  {:>3}  {:>3}  {:>3}  {:>3}",
                c.clip_id,
                c.accuracy,
                c.counts.substitutions,
                c.counts.deletions,
                c.counts.insertions,
                c.reference_len
            )?;
        }
        let (t, n) = self.totals();
        writeln!(
            f,
            "{:<width$}  {:>8.4}  {:>3}  {:>3}  {:>3}  {:>3}",
            "pooled",
            self.pooled_letter_accuracy(),
            t.substitutions,
            t.deletions,
            t.insertions,
            n
        )?;
        write!(f, "mean letter accuracy over {} clips: {:.4}", self.per_clip.len(), self.mean_letter_accuracy())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> LabelSeq {
        LabelSeq(s.bytes().map(usize::from).collect())
    }

    fn counts(s: usize, d: usize, i: usize) -> EditCounts {
        EditCounts { substitutions: s, deletions: d, insertions: i }
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(edit_alignment(&seq("cat"), &seq("cat")), counts(0, 0, 0));
        assert_eq!(edit_alignment(&seq(""), &seq("cat")), counts(0, 3, 0));
        assert_eq!(edit_alignment(&seq("kitten"), &seq("sitting")).cost(), 3);
        assert_eq!(edit_alignment(&seq("catsss"), &seq("cat")), counts(0, 0, 3));
    }

    #[test]
    fn tie_prefers_substitution_over_insert_delete() {
        // "ab" vs "ba": two substitutions, or one insertion plus one deletion
        assert_eq!(edit_alignment(&seq("ab"), &seq("ba")), counts(2, 0, 0));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(letter_accuracy(&seq("cat"), &seq("cat")).unwrap(), 1.0);
        assert_eq!(letter_accuracy(&seq("catsss"), &seq("cat")).unwrap(), 0.0);
        assert_eq!(letter_accuracy(&seq("xyzxyz"), &seq("ab")).unwrap(), 0.0);
        assert!(letter_accuracy(&seq("a"), &seq("")).is_err());
    }

    #[test]
    fn report_aggregates() {
        let mut r = EvalReport::default();
        r.push("c1", &seq("cat"), &seq("cat")).unwrap();
        r.push("c2", &seq("ct"), &seq("cart")).unwrap();
        assert_eq!(r.mean_letter_accuracy(), 0.75);
        assert!((r.pooled_letter_accuracy() - (1.0 - 2.0 / 7.0)).abs() < 1e-15);
        assert_eq!(r.to_lines(), "c1\t1\t0\t0\t0\t3\nc2\t0.5\t0\t2\t0\t4\n");
        assert!(r.to_string().contains("pooled"));
    }
}
