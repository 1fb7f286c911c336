//! The processing-unit stack: anchor self-attention, anchor cross-attention,
//! anchor-primary attention and the shared FFN.
//!
//! Only the `k` anchors attend to each other; every primal point attends to
//! the anchors of its own image, so no attention matrix is ever `n×n` or
//! `n×m`. Each stage adds a projected message to its input (residual) with no
//! normalisation; layer norm appears only in front of the FFN.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{BoundFfn, BoundLinear, BoundModel, BoundTriple, BoundUnit};
use crate::real::Real;

/// Attention shapes seen during one pass, for bottleneck checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionLog {
    pub shapes: Vec<(usize, usize)>,
}

impl AttentionLog {
    pub fn largest(&self) -> Option<(usize, usize)> {
        self.shapes.iter().copied().max_by_key(|(r, c)| r * c)
    }
}

/// `LP(softmax(Q·Kᵀ/√d)·V)` with queries from `query_in` and keys/values
/// from `context`. With several heads, `d = c / heads` and the heads are
/// concatenated before the output projection.
pub fn attention_message<T: Real>(
    tape: &mut Tape<T>,
    query_in: Var,
    context: Var,
    proj: &BoundTriple,
    out: &BoundLinear,
    heads: usize,
    log: &mut AttentionLog,
) -> Result<Var> {
    let q = proj.query.apply(tape, query_in)?;
    let k = proj.key.apply(tape, context)?;
    let v = proj.value.apply(tape, context)?;
    let c = tape.shape(q).1;
    if heads == 0 || c % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{heads} heads do not divide width {c}")));
    }
    let width = c / heads;
    let inv_sqrt = T::of(1.0 / (width as f64).sqrt());
    let mut messages = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * width, width)?,
                tape.slice_cols(k, h * width, width)?,
                tape.slice_cols(v, h * width, width)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        log.shapes.push(tape.shape(scores));
        let scores = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax_rows(scores);
        messages.push(tape.matmul(attn, vh)?);
    }
    let msg = if heads == 1 {
        messages[0]
    } else {
        tape.concat_cols(&messages)?
    };
    out.apply(tape, msg)
}

/// `Y1 = A + LP(SAttn(A)·V)` for each image.
pub fn anchor_self_attention<T: Real>(
    tape: &mut Tape<T>,
    a_s: Var,
    a_t: Var,
    unit: &BoundUnit,
    config: &ModelConfig,
    log: &mut AttentionLog,
) -> Result<(Var, Var)> {
    let m_s = attention_message(tape, a_s, a_s, &unit.self_proj, &unit.self_out, config.heads, log)?;
    let m_t = attention_message(
        tape,
        a_t,
        a_t,
        &unit.self_proj_target,
        &unit.self_out,
        config.heads,
        log,
    )?;
    Ok((tape.add(a_s, m_s)?, tape.add(a_t, m_t)?))
}

/// `Y2_s = Y1_s + LP(CAttn(Y1_s → Y1_t)·V_t)` and its mirror, with one
/// projection triple shared by both directions.
pub fn anchor_cross_attention<T: Real>(
    tape: &mut Tape<T>,
    y1_s: Var,
    y1_t: Var,
    unit: &BoundUnit,
    config: &ModelConfig,
    log: &mut AttentionLog,
) -> Result<(Var, Var)> {
    if tape.shape(y1_s) != tape.shape(y1_t) {
        return Err(Error::ShapeMismatch(format!(
            "cross attention needs equal anchor sets, got {:?} and {:?}",
            tape.shape(y1_s),
            tape.shape(y1_t)
        )));
    }
    let m_s = attention_message(tape, y1_s, y1_t, &unit.cross_proj, &unit.cross_out, config.heads, log)?;
    let m_t = attention_message(tape, y1_t, y1_s, &unit.cross_proj, &unit.cross_out, config.heads, log)?;
    Ok((tape.add(y1_s, m_s)?, tape.add(y1_t, m_t)?))
}

/// `Y3 = F + LP(Attn(F → Y2)·V3)`: primal points query their image's anchors.
pub fn anchor_primary_attention<T: Real>(
    tape: &mut Tape<T>,
    f_s: Var,
    f_t: Var,
    y2_s: Var,
    y2_t: Var,
    unit: &BoundUnit,
    config: &ModelConfig,
    log: &mut AttentionLog,
) -> Result<(Var, Var)> {
    let m_s = attention_message(tape, f_s, y2_s, &unit.primary_proj, &unit.primary_out, config.heads, log)?;
    let m_t = attention_message(tape, f_t, y2_t, &unit.primary_proj, &unit.primary_out, config.heads, log)?;
    Ok((tape.add(f_s, m_s)?, tape.add(f_t, m_t)?))
}

/// `Ỹ = FFN(LN(Y3)) + Y3`, the same leaves serving both images.
pub fn shared_ffn<T: Real>(tape: &mut Tape<T>, y3_s: Var, y3_t: Var, ffn: &BoundFfn) -> Result<(Var, Var)> {
    let branch = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
        let h = tape.layer_norm(y, ffn.norm_gain, ffn.norm_bias)?;
        let h = ffn.inner.apply(tape, h)?;
        let h = tape.relu(h);
        let h = ffn.outer.apply(tape, h)?;
        tape.add(h, y)
    };
    Ok((branch(tape, y3_s)?, branch(tape, y3_t)?))
}

/// Per-pair logits `w·(Y2_s[i] ⊙ Y2_t[i]) + b`, as a `k×1` column.
pub fn anchor_logits<T: Real>(tape: &mut Tape<T>, y2_s: Var, y2_t: Var, head: &BoundLinear) -> Result<Var> {
    let prod = tape.mul(y2_s, y2_t)?;
    head.apply(tape, prod)
}

/// Intermediate values of one unit.
#[derive(Debug, Clone, Copy)]
pub struct UnitTrace {
    pub y1_s: Var,
    pub y1_t: Var,
    pub y2_s: Var,
    pub y2_t: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub y_s: Var,
    pub y_t: Var,
    /// Anchor-primary outputs (before the FFN) of the last update.
    pub y3_s: Var,
    pub y3_t: Var,
    pub units: Vec<UnitTrace>,
    pub attention: AttentionLog,
}

impl ForwardOutput {
    pub fn logits(&self) -> Vec<Var> {
        self.units.iter().map(|u| u.logits).collect()
    }
}

/// Runs `R` units on the anchors gathered from `f_s`/`f_t`.
///
/// Anchor features carry from unit to unit. Anchor-primary attention and the
/// FFN run once after the last unit, or after every unit when
/// `primary_every_unit` is set (then the updated primal features feed the
/// next unit's anchor gather).
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    f_s: Var,
    f_t: Var,
    anchor_source: &[usize],
    anchor_target: &[usize],
    model: &BoundModel,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    if anchor_source.is_empty() || anchor_source.len() != anchor_target.len() {
        return Err(Error::ShapeMismatch(format!(
            "anchor lists of length {} and {}",
            anchor_source.len(),
            anchor_target.len()
        )));
    }
    if model.units.is_empty() {
        return Err(Error::Config("model has no processing units".into()));
    }
    let mut log = AttentionLog::default();
    let mut a_s = tape.gather_rows(f_s, anchor_source)?;
    let mut a_t = tape.gather_rows(f_t, anchor_target)?;
    let (mut cur_s, mut cur_t) = (f_s, f_t);
    let (mut y3_s, mut y3_t) = (f_s, f_t);
    let mut units = Vec::with_capacity(model.units.len());
    let last = model.units.len() - 1;

    for (r, unit) in model.units.iter().enumerate() {
        let (y1_s, y1_t) = anchor_self_attention(tape, a_s, a_t, unit, config, &mut log)?;
        let (y2_s, y2_t) = if config.use_cross {
            anchor_cross_attention(tape, y1_s, y1_t, unit, config, &mut log)?
        } else {
            (y1_s, y1_t)
        };
        let logits = anchor_logits(tape, y2_s, y2_t, &unit.anchor_head)?;
        units.push(UnitTrace {
            y1_s,
            y1_t,
            y2_s,
            y2_t,
            logits,
        });
        a_s = y2_s;
        a_t = y2_t;

        if config.primary_every_unit || r == last {
            (y3_s, y3_t) =
                anchor_primary_attention(tape, cur_s, cur_t, y2_s, y2_t, unit, config, &mut log)?;
            (cur_s, cur_t) = if config.use_ffn {
                shared_ffn(tape, y3_s, y3_t, &model.ffn)?
            } else {
                (y3_s, y3_t)
            };
        }
    }
    Ok(ForwardOutput {
        y_s: cur_s,
        y_t: cur_t,
        y3_s,
        y3_t,
        units,
        attention: log,
    })
}

/// Dense reference with the same kernels: every unit runs self-attention
/// over all `n` (resp. `m`) points and cross-attention over all `n×m`
/// pairs, followed by the shared FFN. Used only as a timing baseline.
pub fn full_attention_forward<T: Real>(
    tape: &mut Tape<T>,
    f_s: Var,
    f_t: Var,
    model: &BoundModel,
    config: &ModelConfig,
) -> Result<(Var, Var, AttentionLog)> {
    let mut log = AttentionLog::default();
    let (mut x_s, mut x_t) = (f_s, f_t);
    for unit in &model.units {
        let (y1_s, y1_t) = anchor_self_attention(tape, x_s, x_t, unit, config, &mut log)?;
        let m_s = attention_message(tape, y1_s, y1_t, &unit.cross_proj, &unit.cross_out, config.heads, &mut log)?;
        let m_t = attention_message(tape, y1_t, y1_s, &unit.cross_proj, &unit.cross_out, config.heads, &mut log)?;
        x_s = tape.add(y1_s, m_s)?;
        x_t = tape.add(y1_t, m_t)?;
    }
    let (y_s, y_t) = if config.use_ffn {
        shared_ffn(tape, x_s, x_t, &model.ffn)?
    } else {
        (x_s, x_t)
    };
    Ok((y_s, y_t, log))
}

#[cfg(test)]
mod tests;
