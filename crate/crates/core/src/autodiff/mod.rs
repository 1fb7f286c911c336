//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] owns every intermediate value. Each primitive appends one node
//! holding its output and whatever its backward rule needs, so the node list
//! is topologically ordered by construction. [`Tape::backward`] walks the list
//! in reverse once and accumulates (sums) cotangents into each operand.
//!
//! ```
//! use amatformer::autodiff::Tape;
//! use amatformer::Matrix;
//!
//! let mut tape = Tape::<f64>::new();
//! let a = tape.leaf(Matrix::from_f64(1, 2, &[1.0, 2.0]).unwrap());
//! let b = tape.leaf(Matrix::from_f64(2, 1, &[3.0, 4.0]).unwrap());
//! let c = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(c);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(tape.value(c).item(), 11.0);
//! assert_eq!(grads.get(a).as_slice(), &[3.0, 4.0]);
//! ```

mod check;

pub use check::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::matrix::{gemm_nn, gemm_nt, gemm_tn, Matrix};
use crate::real::Real;

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm {
        gain: Var,
        bias: Var,
        x: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Dustbin(Var, Var),
    Pick(Var, Vec<(usize, usize)>),
    ClampMin(Var, T),
    BceWithLogits(Var, Vec<T>),
    NormalizeRows(Var, Vec<T>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Recording of one forward evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!(
        "{what}: {}x{} vs {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations spent in matrix products so far
    /// (one multiply-add counts as 2).
    pub fn matmul_flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; a leaf
    /// that never reaches the loss simply gets a zero gradient.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm_nn(av, bv, &mut out);
        self.flops += 2 * (av.rows() * av.cols() * bv.cols()) as u64;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm_nt(av, bv, &mut out);
        self.flops += 2 * (av.rows() * av.cols() * bv.rows()) as u64;
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a `1×q` row to every row of a `p×q` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        let r = rv.as_slice();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Adds a `p×1` column to every column of a `p×q` matrix.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("add_col", av.shape(), cv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let b = cv.as_slice()[i];
            for o in out.row_mut(i) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddCol(a, col)))
    }

    /// `x·w (+ b)` with `w: c_in×c_out` and `b: 1×c_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.push(out, Op::Exp(a))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Standardises each row then applies `gain` and `bias` (both `1×c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c < 2 {
            return Err(Error::DegenerateWidth(c));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(c as f64);
        let mut xhat = Matrix::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Matrix::zeros(xv.rows(), c);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let h = xhat.row_mut(i);
            for (hj, &v) in h.iter_mut().zip(row) {
                *hj = (v - mean) * is;
            }
            let h = xhat.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = h[j] * gv.as_slice()[j] + bv.as_slice()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                gain,
                bias,
                x,
                xhat,
                inv_std,
            },
        ))
    }

    /// `log Σ_j exp(a_ij)` per row, as a `p×1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::from_fn(av.rows(), 1, |i, _| logsumexp(av.row(i).iter().copied()));
        self.push(out, Op::LogSumExpRows(a))
    }

    /// `log Σ_i exp(a_ij)` per column, as a `1×q` row.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::from_fn(1, av.cols(), |_, j| {
            logsumexp((0..av.rows()).map(|i| av.get(i, j)))
        });
        self.push(out, Op::LogSumExpCols(a))
    }

    /// Sum of all entries as a `1×1` slot.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::IndexOutOfBounds(format!(
                "row {bad} of a {}-row matrix",
                av.rows()
            )));
        }
        let out = av.gather_rows(indices);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec())))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        if start + width > av.cols() {
            return Err(Error::IndexOutOfBounds(format!(
                "columns {start}..{} of {}",
                start + width,
                av.cols()
            )));
        }
        let out = Matrix::from_fn(av.rows(), width, |i, j| av.get(i, start + j));
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::ShapeMismatch("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                out.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Appends a dustbin row and column filled with the `1×1` score `z`.
    pub fn augment_dustbin(&mut self, s: Var, z: Var) -> Result<Var> {
        if self.shape(z) != (1, 1) {
            let (r, c) = self.shape(z);
            return Err(Error::NotScalar(r, c));
        }
        let zv = self.value(z).item();
        let sv = self.value(s);
        let (n, m) = sv.shape();
        let out = Matrix::from_fn(n + 1, m + 1, |i, j| {
            if i < n && j < m {
                sv.get(i, j)
            } else {
                zv
            }
        });
        Ok(self.push(out, Op::Dustbin(s, z)))
    }

    /// Selected entries as a `len×1` column.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.shape();
        if let Some(&(i, j)) = entries.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::IndexOutOfBounds(format!(
                "entry ({i}, {j}) of a {r}x{c} matrix"
            )));
        }
        let out = Matrix::from_fn(entries.len(), 1, |k, _| av.get(entries[k].0, entries[k].1));
        Ok(self.push(out, Op::Pick(a, entries.to_vec())))
    }

    /// `max(a, floor)`; the floored entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|x| if x > floor { x } else { floor });
        self.push(out, Op::ClampMin(a, floor))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(Error::LengthMismatch(lv.len(), labels.len()));
        }
        let k = T::of(labels.len().max(1) as f64);
        let total: T = lv
            .as_slice()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Matrix::scalar(total / k),
            Op::BceWithLogits(logits, labels.to_vec()),
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let tiny = T::of(1e-12);
        let norms: Vec<T> = (0..av.rows())
            .map(|i| av.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny))
            .collect();
        let out = Matrix::from_fn(av.rows(), av.cols(), |i, j| av.get(i, j) / norms[i]);
        self.push(out, Op::NormalizeRows(a, norms))
    }

    /// Propagates from the `1×1` slot `loss` back to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar(r, c));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = accum(&mut grads, *a, av.shape());
                    gemm_nt(&g, bv, ga);
                    let gb = accum(&mut grads, *b, bv.shape());
                    gemm_tn(av, &g, gb);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = accum(&mut grads, *a, av.shape());
                    gemm_nn(&g, bv, ga);
                    let gb = accum(&mut grads, *b, bv.shape());
                    gemm_tn(&g, av, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.shape()).add_assign(&g);
                    accum(&mut grads, *b, g.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.shape()).add_assign(&g);
                    let gb = accum(&mut grads, *b, g.shape());
                    for (o, &d) in gb.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |d, y| d * y);
                    let db = g.zip_map(self.value(*a), |d, x| d * x);
                    accum(&mut grads, *a, g.shape()).add_assign(&da);
                    accum(&mut grads, *b, g.shape()).add_assign(&db);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    let ga = accum(&mut grads, *a, g.shape());
                    for (o, &d) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += d * s;
                    }
                }
                Op::AddRow(a, row) => {
                    accum(&mut grads, *a, g.shape()).add_assign(&g);
                    let gr = accum(&mut grads, *row, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (o, &d) in gr.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += d;
                        }
                    }
                }
                Op::AddCol(a, col) => {
                    accum(&mut grads, *a, g.shape()).add_assign(&g);
                    let gc = accum(&mut grads, *col, (g.rows(), 1));
                    for i in 0..g.rows() {
                        gc.as_mut_slice()[i] += g.row(i).iter().copied().sum::<T>();
                    }
                }
                Op::Relu(a) => {
                    let da = g.zip_map(&node.value, |d, y| if y > T::zero() { d } else { T::zero() });
                    accum(&mut grads, *a, g.shape()).add_assign(&da);
                }
                Op::Exp(a) => {
                    let da = g.zip_map(&node.value, |d, y| d * y);
                    accum(&mut grads, *a, g.shape()).add_assign(&da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let ga = accum(&mut grads, *a, g.shape());
                    for i in 0..g.rows() {
                        let (yr, dr) = (y.row(i), g.row(i));
                        let inner: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((o, &p), &d) in ga.row_mut(i).iter_mut().zip(yr).zip(dr) {
                            *o += p * (d - inner);
                        }
                    }
                }
                Op::LayerNorm {
                    gain,
                    bias,
                    x,
                    xhat,
                    inv_std,
                } => {
                    let c = g.cols();
                    let gv = self.value(*gain).clone();
                    {
                        let gg = accum(&mut grads, *gain, (1, c));
                        for i in 0..g.rows() {
                            for j in 0..c {
                                gg.as_mut_slice()[j] += g.get(i, j) * xhat.get(i, j);
                            }
                        }
                    }
                    {
                        let gb = accum(&mut grads, *bias, (1, c));
                        for i in 0..g.rows() {
                            for (o, &d) in gb.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *o += d;
                            }
                        }
                    }
                    let n = T::of(c as f64);
                    let gx = accum(&mut grads, *x, g.shape());
                    for i in 0..g.rows() {
                        let dxhat: Vec<T> = (0..c).map(|j| g.get(i, j) * gv.as_slice()[j]).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xhat.row(i)).map(|(&d, &h)| d * h).sum();
                        let scale = inv_std[i] / n;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o += scale * (n * dxhat[j] - s1 - xhat.get(i, j) * s2);
                        }
                    }
                }
                Op::LogSumExpRows(a) => {
                    let av = self.value(*a);
                    let ga = accum(&mut grads, *a, av.shape());
                    for i in 0..av.rows() {
                        let (d, lse) = (g.as_slice()[i], node.value.as_slice()[i]);
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o += d * (x - lse).exp();
                        }
                    }
                }
                Op::LogSumExpCols(a) => {
                    let av = self.value(*a);
                    let ga = accum(&mut grads, *a, av.shape());
                    for i in 0..av.rows() {
                        let row = av.row(i);
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o += g.as_slice()[j] * (row[j] - node.value.as_slice()[j]).exp();
                        }
                    }
                }
                Op::Sum(a) => {
                    let d = g.item();
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for o in ga.as_mut_slice() {
                        *o += d;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, &d) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += d;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for i in 0..g.rows() {
                        for (o, &d) in ga.row_mut(i)[*start..].iter_mut().zip(g.row(i)) {
                            *o += d;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let gp = accum(&mut grads, p, self.shape(p));
                        for i in 0..g.rows() {
                            for (o, &d) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *o += d;
                            }
                        }
                        off += w;
                    }
                }
                Op::Dustbin(s, z) => {
                    let (n, m) = self.shape(*s);
                    let mut dz = T::zero();
                    {
                        let gs = accum(&mut grads, *s, (n, m));
                        for i in 0..=n {
                            for j in 0..=m {
                                let d = g.get(i, j);
                                if i < n && j < m {
                                    gs.as_mut_slice()[i * m + j] += d;
                                } else {
                                    dz += d;
                                }
                            }
                        }
                    }
                    accum(&mut grads, *z, (1, 1)).as_mut_slice()[0] += dz;
                }
                Op::Pick(a, entries) => {
                    let (_, c) = self.shape(*a);
                    let ga = accum(&mut grads, *a, self.shape(*a));
                    for (k, &(i, j)) in entries.iter().enumerate() {
                        ga.as_mut_slice()[i * c + j] += g.as_slice()[k];
                    }
                }
                Op::ClampMin(a, floor) => {
                    let floor = *floor;
                    let da = g.zip_map(self.value(*a), |d, x| if x > floor { d } else { T::zero() });
                    accum(&mut grads, *a, g.shape()).add_assign(&da);
                }
                Op::BceWithLogits(a, labels) => {
                    let d = g.item() / T::of(labels.len().max(1) as f64);
                    let av = self.value(*a);
                    let ga = accum(&mut grads, *a, av.shape());
                    for ((o, &x), &y) in ga.as_mut_slice().iter_mut().zip(av.as_slice()).zip(labels) {
                        *o += d * (sigmoid(x) - y);
                    }
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let ga = accum(&mut grads, *a, g.shape());
                    for i in 0..g.rows() {
                        let (yr, dr) = (y.row(i), g.row(i));
                        let inner: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((o, &p), &d) in ga.row_mut(i).iter_mut().zip(yr).zip(dr) {
                            *o += (d - p * inner) / norms[i];
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accum<T: Real>(
    grads: &mut [Option<Matrix<T>>],
    v: Var,
    shape: (usize, usize),
) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn try_get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; values the loss never reads get zeros.
    pub fn get(&self, v: Var) -> Matrix<T> {
        self.try_get(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn logsumexp<T: Real>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<T>().ln()
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
