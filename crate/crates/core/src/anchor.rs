//! Ratio-test anchor selection.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Tentative correspondence from source point `source` to its nearest
/// target `target`, scored by the distance ratio to the second-nearest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub source: usize,
    pub target: usize,
    /// `d1 / d2` in `[0, 1]`; lower is more reliable.
    pub ratio: f64,
}

/// The `k` selected anchor pairs and their gathered features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPairs<T> {
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub ratios: Vec<f64>,
    /// `A^s`, `k×c`.
    pub anchors_source: Matrix<T>,
    /// `A^t`, `k×c`.
    pub anchors_target: Matrix<T>,
    /// The `k` that was asked for.
    pub requested: usize,
}

impl<T> AnchorPairs<T> {
    pub fn k(&self) -> usize {
        self.source_indices.len()
    }

    /// True when fewer than the requested number of anchors survived.
    pub fn clamped(&self) -> bool {
        self.k() < self.requested
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.source_indices
            .iter()
            .copied()
            .zip(self.target_indices.iter().copied())
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Nearest and second-nearest target of every source row by Euclidean
/// distance. Equal distances resolve to the lower target index.
pub fn nn_ratio_scores<T: Real>(source: &Matrix<T>, target: &Matrix<T>) -> Result<Vec<Candidate>> {
    if target.rows() < 2 {
        return Err(Error::TooFewTargets(target.rows()));
    }
    if source.cols() != target.cols() {
        return Err(Error::ShapeMismatch(format!(
            "source width {} vs target width {}",
            source.cols(),
            target.cols()
        )));
    }
    if !source.is_finite() || !target.is_finite() {
        return Err(Error::NonFiniteValue("ratio test input".into()));
    }
    let out = (0..source.rows())
        .map(|i| {
            let s = source.row(i);
            let (mut best, mut second) = ((f64::INFINITY, usize::MAX), (f64::INFINITY, usize::MAX));
            for j in 0..target.rows() {
                let d = sq_dist(s, target.row(j));
                if d < best.0 {
                    second = best;
                    best = (d, j);
                } else if d < second.0 {
                    second = (d, j);
                }
            }
            let (d1, d2) = (best.0.sqrt(), second.0.sqrt());
            let ratio = if d2 > 0.0 { d1 / d2 } else { 1.0 };
            Candidate {
                source: i,
                target: best.1,
                ratio,
            }
        })
        .collect();
    Ok(out)
}

/// Keeps only candidates whose target's nearest source is the candidate's source.
pub fn retain_mutual<T: Real>(candidates: &mut Vec<Candidate>, source: &Matrix<T>, target: &Matrix<T>) {
    let back: Vec<usize> = (0..target.rows())
        .map(|j| {
            let t = target.row(j);
            let mut best = (f64::INFINITY, usize::MAX);
            for i in 0..source.rows() {
                let d = sq_dist(t, source.row(i));
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        })
        .collect();
    candidates.retain(|c| back[c.target] == c.source);
}

/// Picks the `k` most reliable candidates with distinct targets.
///
/// Candidates are ordered by `(ratio, source)`; each target may be claimed
/// once, by the first candidate that reaches it. When fewer than `k`
/// survive, all survivors are returned and [`AnchorPairs::clamped`] is set.
pub fn select_anchors<T: Real>(
    candidates: &[Candidate],
    k: usize,
    source: &Matrix<T>,
    target: &Matrix<T>,
) -> Result<AnchorPairs<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("anchor count k must be at least 1".into()));
    }
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| {
        a.ratio
            .partial_cmp(&b.ratio)
            .unwrap_or(Ordering::Equal)
            .then(a.source.cmp(&b.source))
    });
    let mut claimed = vec![false; target.rows()];
    let mut seen_source = vec![false; source.rows()];
    let mut picked = Vec::with_capacity(k);
    for c in sorted {
        if picked.len() == k {
            break;
        }
        if c.target >= target.rows() || c.source >= source.rows() {
            return Err(Error::IndexOutOfBounds(format!(
                "candidate ({}, {})",
                c.source, c.target
            )));
        }
        if claimed[c.target] || seen_source[c.source] {
            continue;
        }
        claimed[c.target] = true;
        seen_source[c.source] = true;
        picked.push(c);
    }
    let source_indices: Vec<usize> = picked.iter().map(|c| c.source).collect();
    let target_indices: Vec<usize> = picked.iter().map(|c| c.target).collect();
    Ok(AnchorPairs {
        anchors_source: source.gather_rows(&source_indices),
        anchors_target: target.gather_rows(&target_indices),
        ratios: picked.iter().map(|c| c.ratio).collect(),
        source_indices,
        target_indices,
        requested: k,
    })
}
