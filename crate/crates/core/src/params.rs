//! Learnable parameters, their initialisation, and their binding to a tape.
//!
//! Every tensor is visited in one fixed order (see [`ModelParams::visit`]);
//! checkpoints, the optimizer and gradient collection all rely on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// A group of tensors that can be walked in a stable order and placed on a tape.
pub trait ParamGroup<T: Real> {
    type Bound;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>));
    fn bind(&self, b: &mut Binder<'_, T>) -> Self::Bound;
}

/// Places parameters on a tape, remembering the leaf order. A binder made
/// with [`Binder::reuse`] hands out existing slots instead.
pub struct Binder<'t, T: Real> {
    tape: &'t mut Tape<T>,
    vars: Vec<Var>,
    existing: Option<&'t [Var]>,
}

impl<'t, T: Real> Binder<'t, T> {
    pub fn new(tape: &'t mut Tape<T>) -> Self {
        Self {
            tape,
            vars: Vec::new(),
            existing: None,
        }
    }

    /// Binds to `vars` in visit order; the caller checks the count.
    pub fn reuse(tape: &'t mut Tape<T>, vars: &'t [Var]) -> Self {
        Self {
            tape,
            vars: Vec::new(),
            existing: Some(vars),
        }
    }

    pub fn leaf(&mut self, m: &Matrix<T>) -> Var {
        let v = match self.existing {
            Some(vars) => vars[self.vars.len()],
            None => self.tape.leaf(m.clone()),
        };
        self.vars.push(v);
        v
    }

    pub fn finish(self) -> Vec<Var> {
        self.vars
    }
}

impl<T: Real> ParamGroup<T> for Matrix<T> {
    type Bound = Var;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>)) {
        f(self)
    }

    fn bind(&self, b: &mut Binder<'_, T>) -> Var {
        b.leaf(self)
    }
}

/// Affine map `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, Some(self.bias))
    }
}

impl<T: Real> ParamGroup<T> for Linear<T> {
    type Bound = BoundLinear;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn bind(&self, b: &mut Binder<'_, T>) -> BoundLinear {
        BoundLinear {
            weight: b.leaf(&self.weight),
            bias: b.leaf(&self.bias),
        }
    }
}

/// Query, key and value projections of one attention stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTriple<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundTriple {
    pub query: BoundLinear,
    pub key: BoundLinear,
    pub value: BoundLinear,
}

impl<T: Real> ParamGroup<T> for ProjectionTriple<T> {
    type Bound = BoundTriple;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
    }

    fn bind(&self, b: &mut Binder<'_, T>) -> BoundTriple {
        BoundTriple {
            query: self.query.bind(b),
            key: self.key.bind(b),
            value: self.value.bind(b),
        }
    }
}

/// Weights of one processing unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams<T> {
    pub self_proj: ProjectionTriple<T>,
    /// Separate target-branch self-attention projections, present only when
    /// the branches do not share them.
    pub self_proj_target: Option<ProjectionTriple<T>>,
    pub cross_proj: ProjectionTriple<T>,
    pub primary_proj: ProjectionTriple<T>,
    pub self_out: Linear<T>,
    pub cross_out: Linear<T>,
    pub primary_out: Linear<T>,
    /// `c → 1` classifier over anchor pairs.
    pub anchor_head: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundUnit {
    pub self_proj: BoundTriple,
    pub self_proj_target: BoundTriple,
    pub cross_proj: BoundTriple,
    pub primary_proj: BoundTriple,
    pub self_out: BoundLinear,
    pub cross_out: BoundLinear,
    pub primary_out: BoundLinear,
    pub anchor_head: BoundLinear,
}

impl<T: Real> ParamGroup<T> for UnitParams<T> {
    type Bound = BoundUnit;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>)) {
        self.self_proj.visit(f);
        if let Some(t) = &self.self_proj_target {
            t.visit(f);
        }
        self.cross_proj.visit(f);
        self.primary_proj.visit(f);
        self.self_out.visit(f);
        self.cross_out.visit(f);
        self.primary_out.visit(f);
        self.anchor_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>)) {
        self.self_proj.visit_mut(f);
        if let Some(t) = &mut self.self_proj_target {
            t.visit_mut(f);
        }
        self.cross_proj.visit_mut(f);
        self.primary_proj.visit_mut(f);
        self.self_out.visit_mut(f);
        self.cross_out.visit_mut(f);
        self.primary_out.visit_mut(f);
        self.anchor_head.visit_mut(f);
    }

    fn bind(&self, b: &mut Binder<'_, T>) -> BoundUnit {
        let self_proj = self.self_proj.bind(b);
        let self_proj_target = match &self.self_proj_target {
            Some(t) => t.bind(b),
            None => self_proj,
        };
        BoundUnit {
            self_proj,
            self_proj_target,
            cross_proj: self.cross_proj.bind(b),
            primary_proj: self.primary_proj.bind(b),
            self_out: self.self_out.bind(b),
            cross_out: self.cross_out.bind(b),
            primary_out: self.primary_out.bind(b),
            anchor_head: self.anchor_head.bind(b),
        }
    }
}

/// Descriptor projection and the `3 → hidden → c` position MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub descriptor: Linear<T>,
    pub position_hidden: Linear<T>,
    pub position_out: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub descriptor: BoundLinear,
    pub position_hidden: BoundLinear,
    pub position_out: BoundLinear,
}

impl<T: Real> ParamGroup<T> for EncoderParams<T> {
    type Bound = BoundEncoder;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>)) {
        self.descriptor.visit(f);
        self.position_hidden.visit(f);
        self.position_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>)) {
        self.descriptor.visit_mut(f);
        self.position_hidden.visit_mut(f);
        self.position_out.visit_mut(f);
    }

    fn bind(&self, b: &mut Binder<'_, T>) -> BoundEncoder {
        BoundEncoder {
            descriptor: self.descriptor.bind(b),
            position_hidden: self.position_hidden.bind(b),
            position_out: self.position_out.bind(b),
        }
    }
}

/// Layer norm followed by `c → e·c → c`; one instance serves both images.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T> {
    pub norm_gain: Matrix<T>,
    pub norm_bias: Matrix<T>,
    pub inner: Linear<T>,
    pub outer: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFfn {
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub inner: BoundLinear,
    pub outer: BoundLinear,
}

impl<T: Real> ParamGroup<T> for FfnParams<T> {
    type Bound = BoundFfn;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>)) {
        f(&self.norm_gain);
        f(&self.norm_bias);
        self.inner.visit(f);
        self.outer.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>)) {
        f(&mut self.norm_gain);
        f(&mut self.norm_bias);
        self.inner.visit_mut(f);
        self.outer.visit_mut(f);
    }

    fn bind(&self, b: &mut Binder<'_, T>) -> BoundFfn {
        BoundFfn {
            norm_gain: b.leaf(&self.norm_gain),
            norm_bias: b.leaf(&self.norm_bias),
            inner: self.inner.bind(b),
            outer: self.outer.bind(b),
        }
    }
}

/// All learnable state of the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub units: Vec<UnitParams<T>>,
    pub ffn: FfnParams<T>,
    /// Bilinear metric `W` (`c×c`).
    pub metric: Matrix<T>,
    /// Dustbin score `z` (`1×1`).
    pub dustbin: Matrix<T>,
}

/// Parameters bound to one tape. The FFN is bound once, so both image
/// branches read the same leaves.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub units: Vec<BoundUnit>,
    pub ffn: BoundFfn,
    pub metric: Var,
    pub dustbin: Var,
    /// Every leaf in [`ModelParams::visit`] order.
    pub leaves: Vec<Var>,
}

/// Role of a tensor, which decides its initial values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
    One,
    Identity,
    Dustbin,
}

/// Initial metric `√c·I` and dustbin score `√c/2`: unit-norm features that
/// agree score `√c`, unrelated ones score 0, and the dustbin starts halfway.
pub fn initial_metric_scale(channels: usize) -> f64 {
    (channels as f64).sqrt()
}

impl<T: Real> ModelParams<T> {
    fn build(config: &ModelConfig, make: &mut dyn FnMut(usize, usize, Init) -> Matrix<T>) -> Self {
        let c = config.channels;
        let mut linear = |i: usize, o: usize, w: Init| Linear {
            weight: make(i, o, w),
            bias: make(1, o, Init::Zero),
        };
        let encoder = EncoderParams {
            descriptor: linear(config.descriptor_dim, c, Init::Xavier),
            position_hidden: linear(3, config.position_hidden, Init::Xavier),
            position_out: linear(config.position_hidden, c, Init::Xavier),
        };
        let triple = |linear: &mut dyn FnMut(usize, usize, Init) -> Linear<T>| ProjectionTriple {
            query: linear(c, c, Init::Xavier),
            key: linear(c, c, Init::Xavier),
            value: linear(c, c, Init::Xavier),
        };
        let units = (0..config.units)
            .map(|_| {
                let self_proj = triple(&mut linear);
                let self_proj_target =
                    (!config.share_self_projections).then(|| triple(&mut linear));
                UnitParams {
                    self_proj,
                    self_proj_target,
                    cross_proj: triple(&mut linear),
                    primary_proj: triple(&mut linear),
                    self_out: linear(c, c, Init::Zero),
                    cross_out: linear(c, c, Init::Zero),
                    primary_out: linear(c, c, Init::Zero),
                    anchor_head: linear(c, 1, Init::Xavier),
                }
            })
            .collect();
        let hidden = config.ffn_expansion * c;
        let inner = linear(c, hidden, Init::Xavier);
        let outer = linear(hidden, c, Init::Zero);
        let ffn = FfnParams {
            norm_gain: make(1, c, Init::One),
            norm_bias: make(1, c, Init::Zero),
            inner,
            outer,
        };
        Self {
            config: config.clone(),
            encoder,
            units,
            ffn,
            metric: make(c, c, Init::Identity),
            dustbin: make(1, 1, Init::Dustbin),
        }
    }

    /// All-zero tensors with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self::build(config, &mut |r, c, _| Matrix::zeros(r, c))
    }

    /// Seeded initialisation: Xavier-uniform weights, zero biases, zero
    /// attention output projections and FFN output layer (so the untrained
    /// stack is the identity on features), scaled identity metric and a
    /// dustbin halfway between agreeing and unrelated scores.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, &mut |r, c, kind| match kind {
            Init::Xavier => {
                let limit = (6.0 / (r + c) as f64).sqrt();
                Matrix::from_fn(r, c, |_, _| T::of(rng.random_range(-limit..limit)))
            }
            Init::Zero => Matrix::zeros(r, c),
            Init::One => Matrix::filled(r, c, T::one()),
            Init::Identity => {
                let scale = T::of(initial_metric_scale(r));
                Matrix::from_fn(r, c, |i, j| if i == j { scale } else { T::zero() })
            }
            Init::Dustbin => Matrix::scalar(T::of(initial_metric_scale(config.channels) / 2.0)),
        }))
    }

    /// Walks every tensor in checkpoint order: encoder (descriptor,
    /// position hidden, position out), each unit (self, optional target
    /// self, cross and primary triples, the three output projections,
    /// anchor head), FFN (gain, bias, inner, outer), metric, dustbin.
    /// Linear layers yield weight then bias.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix<T>)) {
        self.encoder.visit(f);
        for u in &self.units {
            u.visit(f);
        }
        self.ffn.visit(f);
        f(&self.metric);
        f(&self.dustbin);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix<T>)) {
        self.encoder.visit_mut(f);
        for u in &mut self.units {
            u.visit_mut(f);
        }
        self.ffn.visit_mut(f);
        f(&mut self.metric);
        f(&mut self.dustbin);
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = Vec::new();
        self.visit(&mut |m| out.push(m));
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors().len()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        self.bind_with(Binder::new(tape))
    }

    /// Binds to slots already on the tape, one per tensor in visit order,
    /// e.g. the leaves a gradient check perturbs.
    pub fn bind_existing(&self, tape: &mut Tape<T>, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.tensor_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} slots supplied, model has {} tensors",
                vars.len(),
                self.tensor_count()
            )));
        }
        for (&v, t) in vars.iter().zip(self.tensors()) {
            if tape.shape(v) != t.shape() {
                return Err(Error::ShapeMismatch(format!("slot {:?} does not fit {:?}", tape.shape(v), t.shape())));
            }
        }
        Ok(self.bind_with(Binder::reuse(tape, vars)))
    }

    fn bind_with(&self, mut b: Binder<'_, T>) -> BoundModel {
        let encoder = self.encoder.bind(&mut b);
        let units = self.units.iter().map(|u| u.bind(&mut b)).collect();
        let ffn = self.ffn.bind(&mut b);
        let metric = b.leaf(&self.metric);
        let dustbin = b.leaf(&self.dustbin);
        BoundModel {
            encoder,
            units,
            ffn,
            metric,
            dustbin,
            leaves: b.finish(),
        }
    }

    /// Replaces tensor values in visit order; shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<Matrix<T>>) -> Result<()> {
        let expected = self.tensor_count();
        if tensors.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors supplied, model has {expected}",
                tensors.len()
            )));
        }
        for (t, dst) in tensors.iter().zip(self.tensors()) {
            if t.shape() != dst.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {:?} does not fit {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
        }
        let mut src = tensors.into_iter();
        self.visit_mut(&mut |dst| *dst = src.next().expect("count checked"));
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        out.load_tensors(self.tensors().into_iter().map(Matrix::cast).collect())
            .expect("same config, same shapes");
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}
