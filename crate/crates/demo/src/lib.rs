//! Browser demo. Each op takes plain numbers or JSON and returns JSON; the
//! `*_json` functions are the native entry points, the `wasm_bindgen`
//! wrappers only convert errors.

use amatformer::assignment::{extract_matches, AssignmentMatrix};
use amatformer::config::Config;
use amatformer::flops::{flops_amatformer, flops_sgmnet, flops_superglue};
use amatformer::metrics::{nn_baseline, EvalReport};
use amatformer::pipeline::match_problem;
use amatformer::synth::{derive_seed, generate};
use amatformer::train::Trainer;
use amatformer::{Error, Matrix, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Seed stream of demo problems, apart from the training streams.
const DEMO_STREAM: u64 = 9;

#[derive(Serialize)]
struct ShownMatch {
    source: usize,
    target: usize,
    confidence: f64,
    correct: bool,
}

#[derive(Serialize)]
struct MatchView {
    source: Vec<[f64; 2]>,
    target: Vec<[f64; 2]>,
    anchors: Vec<[usize; 2]>,
    matches: Vec<ShownMatch>,
    model: EvalReport,
    baseline: EvalReport,
    train_loss: Vec<f64>,
}

/// Trains the toy model for `train_steps` steps (0 keeps the
/// initialisation), then matches one synthetic problem and scores it next
/// to mutual nearest neighbours.
pub fn match_synthetic_json(seed: u64, inliers: usize, outliers: usize, desc_noise: f64, anchors: usize, train_steps: usize) -> Result<String> {
    let mut cfg = Config::toy();
    cfg.synth.n_inliers = inliers;
    cfg.synth.n_outliers_source = outliers;
    cfg.synth.n_outliers_target = outliers;
    cfg.synth.desc_noise_sigma = desc_noise;
    cfg.matching.anchors = anchors;
    cfg.train.steps = train_steps;
    cfg.validate()?;

    let mut trainer = Trainer::<f32>::new(cfg.clone())?;
    let mut train_loss = Vec::with_capacity(train_steps);
    while trainer.steps_done() < train_steps as u64 {
        train_loss.push(trainer.step()?.loss);
    }

    let sp = generate(&cfg.synth, cfg.model.descriptor_dim, derive_seed(seed, DEMO_STREAM, 0))?;
    let (n, m) = (sp.problem.n(), sp.problem.m());
    let result = match_problem(&trainer.params, &cfg.matching, &sp.problem)?;
    let truth = sp.truth.match_set();
    let view = MatchView {
        source: sp.problem.source.keypoints.positions().to_vec(),
        target: sp.problem.target.keypoints.positions().to_vec(),
        anchors: result.anchors.pairs().map(|(i, j)| [i, j]).collect(),
        matches: result
            .matches
            .iter()
            .map(|c| ShownMatch {
                source: c.source,
                target: c.target,
                confidence: c.confidence,
                correct: truth.contains(&(c.source, c.target)),
            })
            .collect(),
        model: EvalReport::evaluate(&result.matches, &sp.truth, n, m)?,
        baseline: EvalReport::evaluate(&nn_baseline(&sp.problem), &sp.truth, n, m)?,
        train_loss,
    };
    Ok(serde_json::to_string(&view)?)
}

#[derive(Serialize)]
struct PlanView {
    plan: Vec<Vec<f64>>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    matches: Vec<[usize; 2]>,
}

/// Sinkhorn plan of an `n×m` score matrix (JSON array of rows) with
/// dustbin score `z`.
pub fn sinkhorn_plan_json(scores: &str, z: f64, iters: usize, threshold: f64) -> Result<String> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(scores)?;
    let s = Matrix::<f64>::from_rows(&rows)?;
    if s.rows() == 0 || s.cols() == 0 {
        return Err(Error::EmptySide("score matrix has no entries".into()));
    }
    if !s.is_finite() || !z.is_finite() {
        return Err(Error::NonFiniteValue("scores".into()));
    }
    let (n, m) = s.shape();
    let augmented = Matrix::from_fn(n + 1, m + 1, |i, j| if i < n && j < m { s.get(i, j) } else { z });
    let plan = AssignmentMatrix::from_scores(&augmented, iters)?;
    let view = PlanView {
        plan: plan.plan().to_f64_rows(),
        row_sums: plan.row_sums(),
        col_sums: plan.col_sums(),
        matches: extract_matches(&plan, threshold).iter().map(|c| [c.source, c.target]).collect(),
    };
    Ok(serde_json::to_string(&view)?)
}

#[derive(Serialize)]
struct FlopsCurves {
    n: Vec<u64>,
    amatformer: Vec<u128>,
    sgmnet: Vec<u128>,
    superglue: Vec<u128>,
}

/// Formula costs at `points` evenly spaced `n` up to `n_max`.
pub fn flops_curves_json(k: u64, c: u64, n_max: u64, points: u64) -> Result<String> {
    if k == 0 || c == 0 || n_max == 0 || points == 0 {
        return Err(Error::InvalidArgument("k, c, n_max and points must be positive".into()));
    }
    let n: Vec<u64> = (1..=points).map(|i| (n_max * i / points).max(1)).collect();
    let curves = FlopsCurves {
        amatformer: n.iter().map(|&n| flops_amatformer(n, k, c)).collect(),
        sgmnet: n.iter().map(|&n| flops_sgmnet(n, k, c)).collect(),
        superglue: n.iter().map(|&n| flops_superglue(n, c)).collect(),
        n,
    };
    Ok(serde_json::to_string(&curves)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn match_synthetic(seed: u32, inliers: u32, outliers: u32, desc_noise: f64, anchors: u32, train_steps: u32) -> std::result::Result<String, JsError> {
    js(match_synthetic_json(
        seed as u64,
        inliers as usize,
        outliers as usize,
        desc_noise,
        anchors as usize,
        train_steps as usize,
    ))
}

#[wasm_bindgen]
pub fn sinkhorn_plan(scores: &str, z: f64, iters: u32, threshold: f64) -> std::result::Result<String, JsError> {
    js(sinkhorn_plan_json(scores, z, iters as usize, threshold))
}

#[wasm_bindgen]
pub fn flops_curves(k: u32, c: u32, n_max: u32, points: u32) -> std::result::Result<String, JsError> {
    js(flops_curves_json(k as u64, c as u64, n_max as u64, points as u64))
}
