//! Correspondence-level match quality and the mutual nearest-neighbour
//! baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Correspondence, GroundTruth, MatchProblem};

/// Number of predictions that are ground-truth matches.
pub fn correct_count(pred: &[Correspondence], gt: &GroundTruth) -> usize {
    let truth = gt.match_set();
    pred.iter().filter(|c| truth.contains(&(c.source, c.target))).count()
}

/// Precision with a flag for the empty prediction, where it is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionScore {
    pub value: f64,
    pub empty: bool,
}

pub fn precision(pred: &[Correspondence], gt: &GroundTruth) -> PrecisionScore {
    if pred.is_empty() {
        return PrecisionScore { value: 0.0, empty: true };
    }
    PrecisionScore {
        value: correct_count(pred, gt) as f64 / pred.len() as f64,
        empty: false,
    }
}

/// Correct matches over the mean point count `(n + m) / 2`.
pub fn matching_score(pred: &[Correspondence], gt: &GroundTruth, n: usize, m: usize) -> f64 {
    let total = (n + m) as f64 / 2.0;
    if total == 0.0 {
        return 0.0;
    }
    correct_count(pred, gt) as f64 / total
}

pub fn recall(pred: &[Correspondence], gt: &GroundTruth) -> Result<f64> {
    if gt.matches.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(correct_count(pred, gt) as f64 / gt.matches.len() as f64)
}

/// Index of the strictly nearest row of `others` to `row`, lower index on ties.
fn nearest(row: &[f64], others: &Matrix<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..others.rows() {
        let d: f64 = row.iter().zip(others.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    best
}

/// Mutual nearest neighbours on raw descriptors. Confidence is
/// `1 / (1 + distance)`.
pub fn nn_baseline(problem: &MatchProblem) -> Vec<Correspondence> {
    let s = &problem.source.descriptors.0;
    let t = &problem.target.descriptors.0;
    let back: Vec<Option<usize>> = (0..t.rows()).map(|j| nearest(t.row(j), s).map(|b| b.0)).collect();
    (0..s.rows())
        .filter_map(|i| {
            let (j, d2) = nearest(s.row(i), t)?;
            (back[j] == Some(i)).then(|| Correspondence {
                source: i,
                target: j,
                confidence: 1.0 / (1.0 + d2.sqrt()),
            })
        })
        .collect()
}

/// Per-problem (or averaged) evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub matching_score: f64,
    pub num_pred: f64,
    pub num_gt: f64,
}

impl EvalReport {
    pub fn evaluate(pred: &[Correspondence], gt: &GroundTruth, n: usize, m: usize) -> Result<Self> {
        Ok(Self {
            precision: precision(pred, gt).value,
            recall: recall(pred, gt)?,
            matching_score: matching_score(pred, gt, n, m),
            num_pred: pred.len() as f64,
            num_gt: gt.matches.len() as f64,
        })
    }

    /// Field-wise mean.
    pub fn mean(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no reports to average".into()));
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Ok(Self {
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            matching_score: avg(|r| r.matching_score),
            num_pred: avg(|r| r.num_pred),
            num_gt: avg(|r| r.num_gt),
        })
    }
}
