//! Pair scoring, dustbin augmentation, Sinkhorn normalisation and hard
//! match extraction.

use crate::autodiff::{Tape, Var};
use crate::config::Metric;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Correspondence;
use crate::real::Real;

/// `S = Ỹs·W·Ỹtᵀ`, or cosine similarity of the rows when `metric` is
/// [`Metric::Cosine`] (then `w` is ignored).
pub fn bilinear_similarity<T: Real>(tape: &mut Tape<T>, y_s: Var, y_t: Var, w: Var, metric: Metric) -> Result<Var> {
    let (cs, ct) = (tape.shape(y_s).1, tape.shape(y_t).1);
    if cs != ct {
        return Err(Error::ShapeMismatch(format!("feature widths {cs} and {ct}")));
    }
    match metric {
        Metric::Bilinear => {
            let projected = tape.matmul(y_s, w)?;
            tape.matmul_nt(projected, y_t)
        }
        Metric::Cosine => {
            let a = tape.normalize_rows(y_s);
            let b = tape.normalize_rows(y_t);
            tape.matmul_nt(a, b)
        }
    }
}

/// Log-domain Sinkhorn on a dustbin-augmented score matrix.
///
/// Real rows and columns target mass 1, the dustbin row targets `m` and the
/// dustbin column `n`. Each iteration normalises columns and then rows, so
/// the real rows of the result sum to 1 exactly. Returns the log of the
/// transport plan.
pub fn sinkhorn_log<T: Real>(tape: &mut Tape<T>, scores: Var, iters: usize) -> Result<Var> {
    if iters == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
    }
    let (rows, cols) = tape.shape(scores);
    if rows < 2 || cols < 2 {
        return Err(Error::ShapeMismatch(format!(
            "sinkhorn expects an augmented matrix, got {rows}x{cols}"
        )));
    }
    let (n, m) = (rows - 1, cols - 1);
    let log_a = tape.leaf(Matrix::from_fn(rows, 1, |i, _| {
        if i == n {
            T::of((m as f64).ln())
        } else {
            T::zero()
        }
    }));
    let log_b = tape.leaf(Matrix::from_fn(1, cols, |_, j| {
        if j == m {
            T::of((n as f64).ln())
        } else {
            T::zero()
        }
    }));
    let mut u: Option<Var> = None;
    let mut v = log_b;
    for _ in 0..iters {
        let z = match u {
            Some(u) => tape.add_col(scores, u)?,
            None => scores,
        };
        let lse = tape.logsumexp_cols(z);
        v = tape.sub(log_b, lse)?;
        let z = tape.add_row(scores, v)?;
        let lse = tape.logsumexp_rows(z);
        u = Some(tape.sub(log_a, lse)?);
    }
    let z = tape.add_row(scores, v)?;
    tape.add_col(z, u.expect("at least one iteration ran"))
}

/// Exponentiated [`sinkhorn_log`], still on the tape.
pub fn sinkhorn<T: Real>(tape: &mut Tape<T>, scores: Var, iters: usize) -> Result<Var> {
    let log_plan = sinkhorn_log(tape, scores, iters)?;
    Ok(tape.exp(log_plan))
}

/// A dustbin-augmented `(n+1)×(m+1)` transport plan.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix<T> {
    plan: Matrix<T>,
}

impl<T: Real> AssignmentMatrix<T> {
    pub fn new(plan: Matrix<T>) -> Result<Self> {
        if plan.rows() < 2 || plan.cols() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "assignment matrix must be at least 2x2, got {}x{}",
                plan.rows(),
                plan.cols()
            )));
        }
        if !plan.is_finite() || plan.as_slice().iter().any(|&v| v < T::zero()) {
            return Err(Error::NonFiniteValue("assignment matrix entries must be finite and nonnegative".into()));
        }
        Ok(Self { plan })
    }

    /// Normalises an already-augmented score matrix without keeping a tape.
    pub fn from_scores(scores: &Matrix<T>, iters: usize) -> Result<Self> {
        let mut tape = Tape::new();
        let s = tape.leaf(scores.clone());
        let p = sinkhorn(&mut tape, s, iters)?;
        Self::new(tape.value(p).clone())
    }

    pub fn n(&self) -> usize {
        self.plan.rows() - 1
    }

    pub fn m(&self) -> usize {
        self.plan.cols() - 1
    }

    pub fn plan(&self) -> &Matrix<T> {
        &self.plan
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.plan.get(i, j)
    }

    /// Sums of the `n` real rows.
    pub fn row_sums(&self) -> Vec<T> {
        (0..self.n()).map(|i| self.plan.row(i).iter().copied().sum()).collect()
    }

    /// Sums of the `m` real columns.
    pub fn col_sums(&self) -> Vec<T> {
        (0..self.m())
            .map(|j| (0..self.plan.rows()).map(|i| self.plan.get(i, j)).sum())
            .collect()
    }
}

/// Mutual-argmax matches over the real block.
///
/// `(i, j)` is kept when its entry is the strict maximum of row `i` and of
/// column `j` (dustbins excluded) and is at least `threshold`. Output is
/// ordered by source index.
pub fn extract_matches<T: Real>(plan: &AssignmentMatrix<T>, threshold: f64) -> Vec<Correspondence> {
    let (n, m) = (plan.n(), plan.m());
    let strict_argmax = |values: &mut dyn Iterator<Item = T>| -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        let mut tied = false;
        for (idx, v) in values.enumerate() {
            match best {
                Some((_, b)) if v < b => {}
                Some((_, b)) if v == b => tied = true,
                _ => {
                    best = Some((idx, v));
                    tied = false;
                }
            }
        }
        best.filter(|_| !tied).map(|(idx, _)| idx)
    };
    let col_best: Vec<Option<usize>> = (0..m)
        .map(|j| strict_argmax(&mut (0..n).map(|i| plan.get(i, j))))
        .collect();
    let mut out = Vec::new();
    for i in 0..n {
        let Some(j) = strict_argmax(&mut plan.plan.row(i)[..m].iter().copied()) else {
            continue;
        };
        let value = plan.get(i, j).as_f64();
        if col_best[j] == Some(i) && value >= threshold {
            out.push(Correspondence {
                source: i,
                target: j,
                confidence: value,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests;
