//! Ordered-pair construction over a mini-batch of ground-truth scores.

use crate::error::{Error, Result};

/// Ground-truth differences at or below this magnitude are treated as ties.
pub const DEFAULT_TIE_TOLERANCE: f64 = 1e-9;

/// One element of the pair set: indices `i < j` into the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    /// `sign(y_i - y_j)`: `+1.0` when sample `i` should score higher.
    pub sign: f64,
    /// `|y_i - y_j|` in score units.
    pub gap: f64,
}

/// Every unordered pair of a batch whose ground-truth scores differ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pairs: Vec<Pair>,
}

impl PairSet {
    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Pair> {
        self.pairs.iter()
    }

    /// Largest index referenced by any pair, if any.
    pub(crate) fn max_index(&self) -> Option<usize> {
        self.pairs.iter().map(|p| p.j).max()
    }
}

impl<'a> IntoIterator for &'a PairSet {
    type Item = &'a Pair;
    type IntoIter = std::slice::Iter<'a, Pair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

/// `+1` for strictly positive input, `-1` otherwise.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Builds the pair set of a batch: every `(i, j)` with `i < j` and
/// `|y_i - y_j| > tie_tolerance`, in lexicographic order.
pub fn build_pair_set(y_true: &[f64], tie_tolerance: f64) -> PairSet {
    let n = y_true.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = y_true[i] - y_true[j];
            if diff.abs() > tie_tolerance {
                pairs.push(Pair {
                    i,
                    j,
                    sign: sign(diff),
                    gap: diff.abs(),
                });
            }
        }
    }
    PairSet { pairs }
}

/// Min-max normalizes scores against fixed rating-scale bounds.
pub fn normalize_scores(y_true: &[f64], scale_min: f64, scale_max: f64) -> Result<Vec<f64>> {
    if !(scale_min < scale_max) {
        return Err(Error::domain(format!(
            "rating scale [{scale_min}, {scale_max}] is empty"
        )));
    }
    let range = scale_max - scale_min;
    y_true
        .iter()
        .enumerate()
        .map(|(idx, &y)| {
            if !(scale_min..=scale_max).contains(&y) {
                Err(Error::domain(format!(
                    "score {y} at index {idx} lies outside [{scale_min}, {scale_max}]"
                )))
            } else {
                Ok((y - scale_min) / range)
            }
        })
        .collect()
}
