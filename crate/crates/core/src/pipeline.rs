//! Encode, select anchors, run the units, score and normalise: the whole
//! matcher on one problem.

use crate::anchor::{nn_ratio_scores, retain_mutual, select_anchors, AnchorPairs};
use crate::assignment::{bilinear_similarity, extract_matches, sinkhorn_log, AssignmentMatrix};
use crate::autodiff::{Tape, Var};
use crate::block::{forward, ForwardOutput};
use crate::config::{AnchorFeatures, MatchConfig};
use crate::encoder::encode;
use crate::error::Result;
use crate::model::{Correspondence, MatchProblem};
use crate::params::{BoundModel, ModelParams};
use crate::real::Real;

/// Slots recorded by one pass, for losses and inspection.
#[derive(Debug, Clone)]
pub struct Pass<T> {
    pub f_s: Var,
    pub f_t: Var,
    pub anchors: AnchorPairs<T>,
    pub output: ForwardOutput,
    /// `n×m` pair scores before augmentation.
    pub scores: Var,
    /// Log of the `(n+1)×(m+1)` transport plan.
    pub log_plan: Var,
}

/// Records the full forward computation on `tape`.
pub fn forward_pass<T: Real>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    params: &ModelParams<T>,
    matching: &MatchConfig,
    problem: &MatchProblem,
) -> Result<Pass<T>> {
    problem.validate()?;
    let config = &params.config;
    let f_s = encode(tape, &problem.source, &model.encoder, config)?;
    let f_t = encode(tape, &problem.target, &model.encoder, config)?;

    let (sel_s, sel_t) = match matching.anchor_features {
        AnchorFeatures::Encoded => (tape.value(f_s).clone(), tape.value(f_t).clone()),
        AnchorFeatures::Raw => (problem.source.descriptors.0.cast(), problem.target.descriptors.0.cast()),
    };
    let mut candidates = nn_ratio_scores(&sel_s, &sel_t)?;
    if matching.mutual_anchor_filter {
        retain_mutual(&mut candidates, &sel_s, &sel_t);
    }
    let mut anchors = select_anchors(&candidates, matching.anchors, &sel_s, &sel_t)?;
    if matching.anchor_features == AnchorFeatures::Raw {
        anchors.anchors_source = tape.value(f_s).gather_rows(&anchors.source_indices);
        anchors.anchors_target = tape.value(f_t).gather_rows(&anchors.target_indices);
    }

    let output = forward(tape, f_s, f_t, &anchors.source_indices, &anchors.target_indices, model, config)?;
    let scores = bilinear_similarity(tape, output.y_s, output.y_t, model.metric, config.metric)?;
    let augmented = tape.augment_dustbin(scores, model.dustbin)?;
    let log_plan = sinkhorn_log(tape, augmented, matching.sinkhorn_iters)?;
    Ok(Pass {
        f_s,
        f_t,
        anchors,
        output,
        scores,
        log_plan,
    })
}

/// Result of matching one problem.
#[derive(Debug, Clone)]
pub struct MatchResult<T> {
    pub anchors: AnchorPairs<T>,
    pub plan: AssignmentMatrix<T>,
    pub matches: Vec<Correspondence>,
}

pub fn match_problem<T: Real>(params: &ModelParams<T>, matching: &MatchConfig, problem: &MatchProblem) -> Result<MatchResult<T>> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let pass = forward_pass(&mut tape, &model, params, matching, problem)?;
    let plan = AssignmentMatrix::new(tape.value(pass.log_plan).map(|v| v.exp()))?;
    let matches = extract_matches(&plan, matching.threshold);
    Ok(MatchResult {
        anchors: pass.anchors,
        plan,
        matches,
    })
}
