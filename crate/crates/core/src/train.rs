//! Adam and the toy training loop on synthetic problems.
//!
//! Every step draws a fresh problem whose seed is derived from the run seed
//! and the step index, so a run resumed from a checkpoint sees exactly the
//! problems an uninterrupted run would. Held-out problems come from a
//! separate seed stream.

use crate::autodiff::Tape;
use crate::config::{Config, LabelMode};
use crate::error::{Error, Result};
use crate::loss::{exact_anchor_labels, geometric_anchor_labels, problem_loss};
use crate::matrix::Matrix;
use crate::metrics::{nn_baseline, EvalReport};
use crate::params::ModelParams;
use crate::pipeline::{forward_pass, match_problem};
use crate::real::Real;
use crate::synth::{derive_seed, generate, SynthProblem};

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Adam moments and step count, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Matrix<T>]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            m: self.m.iter().map(Matrix::cast).collect(),
            v: self.v.iter().map(Matrix::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Real>(
    params: &mut [Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let c1 = T::one() - T::of(hyper.beta1.powi(t));
    let c2 = T::one() - T::of(hyper.beta2.powi(t));
    let (lr, eps) = (T::of(hyper.lr), T::of(hyper.eps));
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[k].as_mut_slice(), state.v[k].as_mut_slice());
        for (e, (w, &gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            m[e] = b1 * m[e] + (T::one() - b1) * gi;
            v[e] = b2 * v[e] + (T::one() - b2) * gi * gi;
            let m_hat = m[e] / c1;
            let v_hat = v[e] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients down so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Number of updates applied so far, this one included.
    pub step: u64,
    pub loss: f64,
    pub l_m: f64,
    /// Unweighted sum of the per-unit anchor losses.
    pub l_anchor: f64,
}

/// Held-out evaluation of the model next to the nearest-neighbour baseline
/// on the same problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOut {
    pub model: EvalReport,
    pub baseline: EvalReport,
}

/// The problem seen at training step `step` (0-based).
pub fn training_problem(config: &Config, step: u64) -> Result<SynthProblem> {
    generate(&config.synth, config.model.descriptor_dim, derive_seed(config.train.seed, TRAIN_STREAM, step))
}

/// The `index`-th held-out problem.
pub fn heldout_problem(config: &Config, index: usize) -> Result<SynthProblem> {
    generate(&config.synth, config.model.descriptor_dim, derive_seed(config.train.seed, EVAL_STREAM, index as u64))
}

pub fn evaluate_heldout<T: Real>(params: &ModelParams<T>, config: &Config) -> Result<HeldOut> {
    let mut model = Vec::with_capacity(config.train.eval_problems);
    let mut baseline = Vec::with_capacity(config.train.eval_problems);
    for i in 0..config.train.eval_problems.max(1) {
        let sp = heldout_problem(config, i)?;
        let (n, m) = (sp.problem.n(), sp.problem.m());
        let pred = match_problem(params, &config.matching, &sp.problem)?.matches;
        model.push(EvalReport::evaluate(&pred, &sp.truth, n, m)?);
        baseline.push(EvalReport::evaluate(&nn_baseline(&sp.problem), &sp.truth, n, m)?);
    }
    Ok(HeldOut {
        model: EvalReport::mean(&model)?,
        baseline: EvalReport::mean(&baseline)?,
    })
}

/// Parameters plus optimiser state, advanced one synthetic problem at a time.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: Config,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters initialised from the run seed.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.model, config.train.seed)?;
        let adam = AdamState::new(&params.tensors());
        Ok(Self { config, params, adam })
    }

    /// Continues from saved state. The model section of `config` must match
    /// the parameters.
    pub fn resume(config: Config, params: ModelParams<T>, adam: Option<AdamState<T>>) -> Result<Self> {
        config.validate()?;
        if params.config != config.model {
            return Err(Error::Config("checkpoint model settings differ from the run configuration".into()));
        }
        let adam = match adam {
            Some(a) => {
                let shapes_match = a.m.len() == params.tensor_count()
                    && a.v.len() == a.m.len()
                    && params.tensors().iter().zip(&a.m).zip(&a.v).all(|((p, m), v)| p.shape() == m.shape() && p.shape() == v.shape());
                if !shapes_match {
                    return Err(Error::ShapeMismatch("optimizer state does not fit the parameters".into()));
                }
                a
            }
            None => AdamState::new(&params.tensors()),
        };
        Ok(Self { config, params, adam })
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.step
    }

    fn learning_rate(&self) -> f64 {
        let t = &self.config.train;
        if t.lr_decay && t.steps > 0 {
            let frac = self.adam.step as f64 / t.steps as f64;
            t.lr * (1.0 - frac).max(0.0)
        } else {
            t.lr
        }
    }

    /// One forward/backward/update on the next problem of the stream.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.adam.step;
        let sp = training_problem(&self.config, step)?;
        let mut tape = Tape::new();
        let model = self.params.bind(&mut tape);
        // Finite parameters can still overflow in the forward pass.
        let pass = forward_pass(&mut tape, &model, &self.params, &self.config.matching, &sp.problem).map_err(|e| match e {
            Error::NonFiniteValue(_) => Error::NonFiniteLoss { step: step + 1 },
            other => other,
        })?;
        let labels = match self.config.train.label_mode {
            LabelMode::Exact => exact_anchor_labels(&pass.anchors, &sp.truth),
            LabelMode::Geometric => geometric_anchor_labels(
                &pass.anchors,
                &sp.problem.source.keypoints,
                &sp.problem.target.keypoints,
                &sp.warp,
                self.config.train.tau,
            ),
        };
        let parts = problem_loss(&mut tape, pass.log_plan, &pass.output.logits(), &labels, &sp.truth, self.config.train.alpha)?;
        let stats = StepStats {
            step: step + 1,
            loss: tape.value(parts.total).item().as_f64(),
            l_m: tape.value(parts.matching).item().as_f64(),
            l_anchor: tape.value(parts.anchor).item().as_f64(),
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        let grads = tape.backward(parts.total)?;
        let mut grads: Vec<Matrix<T>> = model.leaves.iter().map(|&v| grads.get(v)).collect();
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        clip_global_norm(&mut grads, self.config.train.grad_clip);
        let hyper = AdamHyper {
            lr: self.learning_rate(),
            beta1: self.config.train.beta1,
            beta2: self.config.train.beta2,
            eps: self.config.train.eps,
        };
        let mut tensors: Vec<Matrix<T>> = self.params.tensors().into_iter().cloned().collect();
        adam_step(&mut tensors, &grads, &mut self.adam, &hyper)?;
        self.params.load_tensors(tensors)?;
        if !self.params.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        Ok(stats)
    }

    /// Steps until `config.train.steps` updates have been applied. `log`
    /// receives each step's stats and, at every `eval_interval` and at the
    /// last step, the held-out evaluation.
    pub fn run(&mut self, log: &mut dyn FnMut(&StepStats, Option<&HeldOut>) -> Result<()>) -> Result<()> {
        let total = self.config.train.steps as u64;
        let interval = self.config.train.eval_interval as u64;
        while self.adam.step < total {
            let stats = self.step()?;
            let due = stats.step == total || (interval > 0 && stats.step % interval == 0);
            if due {
                let held = evaluate_heldout(&self.params, &self.config)?;
                log(&stats, Some(&held))?;
            } else {
                log(&stats, None)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Matrix::<f64>::from_f64(1, 3, &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&[&p[0]]);
        for _ in 0..3 {
            adam_step(&mut p, &[Matrix::zeros(1, 3)], &mut s, &hyper(0.1)).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = vec![Matrix::<f64>::from_f64(2, 1, &[1.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&[&p[0]]);
        adam_step(&mut p, &[Matrix::from_f64(2, 1, &[0.4, -7.0]).unwrap()], &mut s, &hyper(0.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_follows_scripted_recurrence() {
        let g = 0.3;
        let h = hyper(0.01);
        let mut p = vec![Matrix::<f64>::scalar(2.0)];
        let mut s = AdamState::new(&[&p[0]]);
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            adam_step(&mut p, &[Matrix::scalar(g)], &mut s, &h).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0].item() - w).abs() < 1e-15, "step {t}");
        }
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut p = vec![Matrix::<f64>::zeros(2, 2)];
        let mut s = AdamState::new(&[&p[0]]);
        assert!(matches!(adam_step(&mut p, &[Matrix::zeros(1, 2)], &mut s, &hyper(0.1)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Matrix::<f64>::from_f64(1, 2, &[3.0, 0.0]).unwrap(), Matrix::scalar(4.0)];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
        let mut small = vec![Matrix::<f64>::scalar(0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.5);
    }

    fn tiny() -> Config {
        let mut c = Config::toy();
        c.model = ModelConfig {
            descriptor_dim: 8,
            channels: 8,
            position_hidden: 4,
            units: 2,
            ..c.model
        };
        c.matching.anchors = 4;
        c.synth.n_inliers = 8;
        c.synth.n_outliers_source = 3;
        c.synth.n_outliers_target = 2;
        c.train.steps = 6;
        c.train.eval_interval = 3;
        c.train.eval_problems = 2;
        c
    }

    #[test]
    fn zero_steps_keep_the_initialisation() {
        let mut c = tiny();
        c.train.steps = 0;
        let mut t = Trainer::<f32>::new(c.clone()).unwrap();
        t.run(&mut |_, _| Ok(())).unwrap();
        assert_eq!(t.params, ModelParams::init(&c.model, c.train.seed).unwrap());
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let c = tiny();
        let mut log_a = Vec::new();
        let mut a = Trainer::<f32>::new(c.clone()).unwrap();
        a.run(&mut |s, h| {
            log_a.push((*s, h.map(|h| h.model.precision)));
            Ok(())
        })
        .unwrap();
        let mut b = Trainer::<f32>::new(c.clone()).unwrap();
        let mut log_b = Vec::new();
        b.run(&mut |s, h| {
            log_b.push((*s, h.map(|h| h.model.precision)));
            Ok(())
        })
        .unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.iter().filter(|r| r.1.is_some()).count(), 2);

        let mut half = c.clone();
        half.train.steps = 4;
        let mut first = Trainer::<f32>::new(half).unwrap();
        first.run(&mut |_, _| Ok(())).unwrap();
        let mut second = Trainer::resume(c, first.params, Some(first.adam)).unwrap();
        second.run(&mut |_, _| Ok(())).unwrap();
        assert_eq!(second.params, a.params);
        assert_eq!(second.adam, a.adam);
    }

    #[test]
    fn training_reduces_the_loss() {
        let mut c = tiny();
        c.train.steps = 60;
        c.train.eval_interval = 0;
        c.train.alpha = 1.0;
        let mut t = Trainer::<f64>::new(c).unwrap();
        let mut losses = Vec::new();
        t.run(&mut |s, _| {
            losses.push(s.l_m);
            Ok(())
        })
        .unwrap();
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[losses.len() - 10..].iter().sum();
        assert!(tail < head, "first {head}, last {tail}");
    }

    #[test]
    fn resume_rejects_a_different_model() {
        let c = tiny();
        let t = Trainer::<f32>::new(c.clone()).unwrap();
        let mut other = c;
        other.model.units = 3;
        assert!(Trainer::resume(other, t.params, None).is_err());
    }
}
