//! Matching loss, anchor labels and the combined objective.

use crate::anchor::AnchorPairs;
use crate::assignment::AssignmentMatrix;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{GroundTruth, KeypointSet};
use crate::real::Real;
use crate::synth::Warp;

/// Plan entries below this are floored before the log.
pub const PLAN_FLOOR: f64 = 1e-12;

/// Plan entries the loss reads: every ground-truth pair, the dustbin column
/// for unmatched sources and the dustbin row for unmatched targets.
fn loss_entries(gt: &GroundTruth, n: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    let oob = |what: &str, i: usize, limit: usize| {
        Error::IndexOutOfBounds(format!("{what} index {i} with {limit} points"))
    };
    let mut entries = Vec::with_capacity(gt.matches.len() + gt.unmatched_source.len() + gt.unmatched_target.len());
    for &(i, j) in &gt.matches {
        if i >= n {
            return Err(oob("source", i, n));
        }
        if j >= m {
            return Err(oob("target", j, m));
        }
        entries.push((i, j));
    }
    for &i in &gt.unmatched_source {
        if i >= n {
            return Err(oob("source", i, n));
        }
        entries.push((i, m));
    }
    for &j in &gt.unmatched_target {
        if j >= m {
            return Err(oob("target", j, m));
        }
        entries.push((n, j));
    }
    Ok(entries)
}

/// Negative log-likelihood of the ground truth under the plan, read from the
/// log plan on the tape.
pub fn matching_loss<T: Real>(tape: &mut Tape<T>, log_plan: Var, gt: &GroundTruth) -> Result<Var> {
    let (rows, cols) = tape.shape(log_plan);
    let entries = loss_entries(gt, rows - 1, cols - 1)?;
    let picked = tape.pick(log_plan, &entries)?;
    let floored = tape.clamp_min(picked, T::of(PLAN_FLOOR.ln()));
    let total = tape.sum(floored);
    Ok(tape.scale(total, -T::one()))
}

/// The same loss evaluated directly on a plan.
pub fn matching_loss_value<T: Real>(plan: &AssignmentMatrix<T>, gt: &GroundTruth) -> Result<f64> {
    let entries = loss_entries(gt, plan.n(), plan.m())?;
    Ok(-entries
        .iter()
        .map(|&(i, j)| plan.get(i, j).as_f64().max(PLAN_FLOOR).ln())
        .sum::<f64>())
}

/// 1 where the anchor pair is a ground-truth match.
pub fn exact_anchor_labels<T>(anchors: &AnchorPairs<T>, gt: &GroundTruth) -> Vec<f64> {
    let truth = gt.match_set();
    anchors
        .pairs()
        .map(|p| if truth.contains(&p) { 1.0 } else { 0.0 })
        .collect()
}

/// 1 where the warped source keypoint lands within `tau` pixels of the
/// target keypoint.
pub fn geometric_anchor_labels<T>(
    anchors: &AnchorPairs<T>,
    source: &KeypointSet,
    target: &KeypointSet,
    warp: &Warp,
    tau: f64,
) -> Vec<f64> {
    anchors
        .pairs()
        .map(|(i, j)| {
            let w = warp.apply(source.positions()[i]);
            let q = target.positions()[j];
            let d = ((w[0] - q[0]).powi(2) + (w[1] - q[1]).powi(2)).sqrt();
            if d < tau {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean binary cross-entropy of one unit's anchor logits.
pub fn anchor_unit_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[f64]) -> Result<Var> {
    let labels: Vec<T> = labels.iter().map(|&l| T::of(l)).collect();
    tape.bce_with_logits(logits, &labels)
}

/// `L_m + α·Σ_r L^r`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l_m: Var, unit_losses: &[Var], alpha: f64) -> Result<Var> {
    if unit_losses.is_empty() {
        return Err(Error::InvalidArgument("total loss needs at least one unit loss".into()));
    }
    let mut anchors = unit_losses[0];
    for &l in &unit_losses[1..] {
        anchors = tape.add(anchors, l)?;
    }
    let weighted = tape.scale(anchors, T::of(alpha));
    tape.add(l_m, weighted)
}

/// Loss parts of one problem, all `1×1` slots on the tape.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub matching: Var,
    /// `Σ_r L^r`, unweighted.
    pub anchor: Var,
}

/// Builds every loss term for one recorded pass.
pub fn problem_loss<T: Real>(
    tape: &mut Tape<T>,
    log_plan: Var,
    unit_logits: &[Var],
    labels: &[f64],
    gt: &GroundTruth,
    alpha: f64,
) -> Result<LossParts> {
    let matching = matching_loss(tape, log_plan, gt)?;
    let units = unit_logits
        .iter()
        .map(|&l| anchor_unit_loss(tape, l, labels))
        .collect::<Result<Vec<_>>>()?;
    let total = total_loss(tape, matching, &units, alpha)?;
    let mut anchor = units[0];
    for &u in &units[1..] {
        anchor = tape.add(anchor, u)?;
    }
    Ok(LossParts { total, matching, anchor })
}
