use crate::error::Result;
use crate::matrix::Matrix;

use super::{Tape, Var};

/// Denominator floor of the relative error, times `max(1, |f(θ)|)`, so that
/// gradients that are zero up to rounding compare on an absolute scale.
/// Central differences carry noise of about `|f|·ε/h`, which grows with the
/// function value.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Which parameter and which flat entry produced `max_rel_error`.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, entry by entry, for every parameter.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a
/// `1×1` slot.
pub fn grad_check<F>(f: F, params: &[Matrix<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Matrix<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let floor = RELATIVE_ERROR_FLOOR * tape.value(out).item().abs().max(1.0);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Matrix<f64>> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for e in 0..params[pi].len() {
            let orig = params[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + h;
            let up = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig - h;
            let down = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.entries_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
