use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::matrix::Matrix;
use crate::params::{Linear, ModelParams, ProjectionTriple};

/// Straight-line re-implementation on nested vectors, independent of the
/// tape and of the matrix kernels.
mod oracle {
    use crate::matrix::Matrix;
    use crate::params::{FfnParams, Linear, ProjectionTriple};

    pub type M = Vec<Vec<f64>>;

    pub fn of(m: &Matrix<f64>) -> M {
        m.to_f64_rows()
    }

    pub fn mm(a: &M, b: &M) -> M {
        let (p, q, r) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; r]; p];
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += a[i][k] * b[k][j];
                }
                out[i][j] = s;
            }
        }
        out
    }

    pub fn transpose(a: &M) -> M {
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }

    pub fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
            .collect()
    }

    pub fn lin(x: &M, l: &Linear<f64>) -> M {
        let b = l.bias.as_slice();
        mm(x, &of(&l.weight))
            .into_iter()
            .map(|r| r.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect()
    }

    pub fn softmax(a: &M) -> M {
        a.iter()
            .map(|r| {
                let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect()
    }

    /// `LP(Softmax(Q Kᵀ / √c) V)`.
    pub fn message(q_in: &M, ctx: &M, p: &ProjectionTriple<f64>, out: &Linear<f64>) -> M {
        let c = q_in[0].len() as f64;
        let q = lin(q_in, &p.query);
        let k = lin(ctx, &p.key);
        let v = lin(ctx, &p.value);
        let scores: M = mm(&q, &transpose(&k))
            .into_iter()
            .map(|r| r.into_iter().map(|s| s / c.sqrt()).collect())
            .collect();
        lin(&mm(&softmax(&scores), &v), out)
    }

    pub fn ffn(y: &M, f: &FfnParams<f64>) -> M {
        let g = f.norm_gain.as_slice();
        let b = f.norm_bias.as_slice();
        let normed: M = y
            .iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect();
        let h: M = lin(&normed, &f.inner)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        add(&lin(&h, &f.outer), y)
    }
}

fn config(c: usize, units: usize) -> ModelConfig {
    ModelConfig {
        descriptor_dim: c,
        channels: c,
        position_hidden: 4,
        units,
        ..ModelConfig::default()
    }
}

fn randomize(rng: &mut ChaCha8Rng, m: &mut Matrix<f64>) {
    for v in m.as_mut_slice() {
        *v = rng.random_range(-0.8..0.8);
    }
}

/// Parameters with every tensor random, including the zero-initialised ones.
fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    p.visit_mut(&mut |m| randomize(&mut rng, m));
    p
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn assert_close(a: &Matrix<f64>, b: &oracle::M, tol: f64) {
    assert_eq!(a.rows(), b.len());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let d = (a.get(i, j) - b[i][j]).abs();
            assert!(d < tol, "entry ({i},{j}): {} vs {}", a.get(i, j), b[i][j]);
        }
    }
}

fn zero_linear(l: &mut Linear<f64>) {
    l.weight = Matrix::zeros(l.weight.rows(), l.weight.cols());
    l.bias = Matrix::zeros(1, l.bias.cols());
}

fn two_leaves(tape: &mut Tape<f64>, a: &Matrix<f64>, b: &Matrix<f64>) -> (Var, Var) {
    (tape.leaf(a.clone()), tape.leaf(b.clone()))
}

#[test]
fn single_anchor_self_attention_is_forced() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a_s, a_t) = (random_matrix(&mut rng, 1, 4), random_matrix(&mut rng, 1, 4));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &a_s, &a_t);
    let (y_s, _) = anchor_self_attention(&mut tape, vs, vt, &bound.units[0], &cfg, &mut AttentionLog::default()).unwrap();
    // With one anchor the softmax is [[1]], so the message is LP(V) for any Q, K.
    let u = &p.units[0];
    let a = oracle::of(&a_s);
    let expect = oracle::add(&a, &oracle::lin(&oracle::lin(&a, &u.self_proj.value), &u.self_out));
    assert_close(tape.value(y_s), &expect, 1e-12);
}

#[test]
fn zero_output_projection_makes_attention_residual() {
    let cfg = config(4, 1);
    let mut p = random_params(&cfg, 3);
    zero_linear(&mut p.units[0].self_out);
    zero_linear(&mut p.units[0].cross_out);
    zero_linear(&mut p.units[0].primary_out);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a_s, a_t) = (random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 3, 4));
    let (f_s, f_t) = (random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 6, 4));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let unit = &bound.units[0];
    let mut log = AttentionLog::default();
    let (vs, vt) = two_leaves(&mut tape, &a_s, &a_t);
    let (y1_s, y1_t) = anchor_self_attention(&mut tape, vs, vt, unit, &cfg, &mut log).unwrap();
    assert_eq!(tape.value(y1_s), &a_s);
    assert_eq!(tape.value(y1_t), &a_t);
    let (y2_s, y2_t) = anchor_cross_attention(&mut tape, y1_s, y1_t, unit, &cfg, &mut log).unwrap();
    assert_eq!(tape.value(y2_s), &a_s);
    assert_eq!(tape.value(y2_t), &a_t);
    let (fs, ft) = two_leaves(&mut tape, &f_s, &f_t);
    let (y3_s, y3_t) = anchor_primary_attention(&mut tape, fs, ft, y2_s, y2_t, unit, &cfg, &mut log).unwrap();
    assert_eq!(tape.value(y3_s), &f_s);
    assert_eq!(tape.value(y3_t), &f_t);
}

#[test]
fn self_attention_matches_scripted_evaluation() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a_s, a_t) = (random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 3, 4));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &a_s, &a_t);
    let (y_s, y_t) = anchor_self_attention(&mut tape, vs, vt, &bound.units[0], &cfg, &mut AttentionLog::default()).unwrap();
    let u = &p.units[0];
    for (a, y) in [(&a_s, y_s), (&a_t, y_t)] {
        let a = oracle::of(a);
        let expect = oracle::add(&a, &oracle::message(&a, &a, &u.self_proj, &u.self_out));
        assert_close(tape.value(y), &expect, 1e-12);
    }
}

#[test]
fn unshared_self_projections_differ_per_branch() {
    let cfg = ModelConfig {
        share_self_projections: false,
        ..config(4, 1)
    };
    let p = random_params(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_matrix(&mut rng, 3, 4);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &a, &a);
    let (y_s, y_t) = anchor_self_attention(&mut tape, vs, vt, &bound.units[0], &cfg, &mut AttentionLog::default()).unwrap();
    assert_ne!(tape.value(y_s), tape.value(y_t));
    let u = &p.units[0];
    let ao = oracle::of(&a);
    let target = u.self_proj_target.as_ref().unwrap();
    let expect = oracle::add(&ao, &oracle::message(&ao, &ao, target, &u.self_out));
    assert_close(tape.value(y_t), &expect, 1e-12);
}

#[test]
fn cross_attention_is_symmetric_on_equal_inputs() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let y = random_matrix(&mut rng, 3, 4);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &y, &y);
    let (y2_s, y2_t) = anchor_cross_attention(&mut tape, vs, vt, &bound.units[0], &cfg, &mut AttentionLog::default()).unwrap();
    assert_eq!(tape.value(y2_s), tape.value(y2_t));
}

#[test]
fn cross_attention_matches_scripted_evaluation() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (y1_s, y1_t) = (random_matrix(&mut rng, 2, 4), random_matrix(&mut rng, 2, 4));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &y1_s, &y1_t);
    let (y2_s, y2_t) = anchor_cross_attention(&mut tape, vs, vt, &bound.units[0], &cfg, &mut AttentionLog::default()).unwrap();
    let u = &p.units[0];
    let (s, t) = (oracle::of(&y1_s), oracle::of(&y1_t));
    let exp_s = oracle::add(&s, &oracle::message(&s, &t, &u.cross_proj, &u.cross_out));
    let exp_t = oracle::add(&t, &oracle::message(&t, &s, &u.cross_proj, &u.cross_out));
    assert_close(tape.value(y2_s), &exp_s, 1e-12);
    assert_close(tape.value(y2_t), &exp_t, 1e-12);
}

#[test]
fn single_anchor_primary_attention_broadcasts_one_message() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (f_s, f_t) = (random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 3, 4));
    let (y2_s, y2_t) = (random_matrix(&mut rng, 1, 4), random_matrix(&mut rng, 1, 4));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (fs, ft) = two_leaves(&mut tape, &f_s, &f_t);
    let (as_, at) = two_leaves(&mut tape, &y2_s, &y2_t);
    let (y3_s, _) = anchor_primary_attention(&mut tape, fs, ft, as_, at, &bound.units[0], &cfg, &mut AttentionLog::default()).unwrap();
    let u = &p.units[0];
    let msg = oracle::lin(&oracle::lin(&oracle::of(&y2_s), &u.primary_proj.value), &u.primary_out);
    let expect: oracle::M = oracle::of(&f_s)
        .iter()
        .map(|r| r.iter().zip(&msg[0]).map(|(a, b)| a + b).collect())
        .collect();
    assert_close(tape.value(y3_s), &expect, 1e-12);
}

#[test]
fn primary_attention_matches_scripted_evaluation() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (f_s, f_t) = (random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 4, 4));
    let (y2_s, y2_t) = (random_matrix(&mut rng, 2, 4), random_matrix(&mut rng, 2, 4));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (fs, ft) = two_leaves(&mut tape, &f_s, &f_t);
    let (as_, at) = two_leaves(&mut tape, &y2_s, &y2_t);
    let mut log = AttentionLog::default();
    let (y3_s, y3_t) = anchor_primary_attention(&mut tape, fs, ft, as_, at, &bound.units[0], &cfg, &mut log).unwrap();
    let u = &p.units[0];
    for (f, y2, y3) in [(&f_s, &y2_s, y3_s), (&f_t, &y2_t, y3_t)] {
        let fo = oracle::of(f);
        let expect = oracle::add(&fo, &oracle::message(&fo, &oracle::of(y2), &u.primary_proj, &u.primary_out));
        assert_close(tape.value(y3), &expect, 1e-12);
    }
    assert_eq!(log.shapes, vec![(5, 2), (4, 2)]);
}

#[test]
fn ffn_with_zero_output_layer_is_identity() {
    let cfg = config(4, 1);
    let mut p = random_params(&cfg, 17);
    zero_linear(&mut p.ffn.outer);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (y_s, y_t) = (random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 2, 4));
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &y_s, &y_t);
    let (o_s, o_t) = shared_ffn(&mut tape, vs, vt, &bound.ffn).unwrap();
    assert_eq!(tape.value(o_s), &y_s);
    assert_eq!(tape.value(o_t), &y_t);
}

#[test]
fn ffn_on_equal_inputs_is_bit_identical() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let y = random_matrix(&mut rng, 6, 4);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &y, &y);
    let (o_s, o_t) = shared_ffn(&mut tape, vs, vt, &bound.ffn).unwrap();
    assert_eq!(tape.value(o_s).as_slice(), tape.value(o_t).as_slice());
}

#[test]
fn ffn_single_row_hand_computation() {
    let cfg = ModelConfig {
        ffn_expansion: 1,
        ..config(4, 1)
    };
    let mut p = ModelParams::<f64>::init(&cfg, 0).unwrap();
    p.ffn.inner.weight = Matrix::identity(4);
    p.ffn.outer.weight = Matrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.0 });
    let y = Matrix::from_f64(1, 4, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (vs, vt) = two_leaves(&mut tape, &y, &y);
    let (o, _) = shared_ffn(&mut tape, vs, vt, &bound.ffn).unwrap();
    // mean 2.5, variance 1.25: LN gives (y - 2.5)/s, ReLU keeps the last two,
    // doubling gives 1/s and 3/s, the residual adds y back.
    let s = (1.25f64 + 1e-5).sqrt();
    let expect = [1.0, 2.0, 3.0 + 1.0 / s, 4.0 + 3.0 / s];
    for (a, b) in tape.value(o).as_slice().iter().zip(expect) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn mutating_shared_ffn_changes_both_branches() {
    let cfg = config(4, 1);
    let mut p = random_params(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (y_s, y_t) = (random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 3, 4));
    let run = |p: &ModelParams<f64>| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let (vs, vt) = two_leaves(&mut tape, &y_s, &y_t);
        let (o_s, o_t) = shared_ffn(&mut tape, vs, vt, &bound.ffn).unwrap();
        (tape.value(o_s).clone(), tape.value(o_t).clone())
    };
    let before = run(&p);
    let w = p.ffn.outer.weight.get(0, 0);
    p.ffn.outer.weight.set(0, 0, w + 0.5);
    let after = run(&p);
    assert_ne!(before.0, after.0);
    assert_ne!(before.1, after.1);
}

fn run_forward(
    p: &ModelParams<f64>,
    cfg: &ModelConfig,
    f_s: &Matrix<f64>,
    f_t: &Matrix<f64>,
    idx_s: &[usize],
    idx_t: &[usize],
) -> (Matrix<f64>, Matrix<f64>, AttentionLog, Vec<Matrix<f64>>) {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let (fs, ft) = two_leaves(&mut tape, f_s, f_t);
    let out = forward(&mut tape, fs, ft, idx_s, idx_t, &bound, cfg).unwrap();
    let logits = out.logits().iter().map(|&v| tape.value(v).clone()).collect();
    (
        tape.value(out.y_s).clone(),
        tape.value(out.y_t).clone(),
        out.attention.clone(),
        logits,
    )
}

#[test]
fn single_unit_forward_composes_the_stages() {
    let cfg = config(4, 1);
    let p = random_params(&cfg, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (f_s, f_t) = (random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 6, 4));
    let (idx_s, idx_t) = (vec![4, 0], vec![1, 5]);
    let (y_s, y_t, _, _) = run_forward(&p, &cfg, &f_s, &f_t, &idx_s, &idx_t);

    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let unit = &bound.units[0];
    let mut log = AttentionLog::default();
    let (fs, ft) = two_leaves(&mut tape, &f_s, &f_t);
    let a_s = tape.gather_rows(fs, &idx_s).unwrap();
    let a_t = tape.gather_rows(ft, &idx_t).unwrap();
    let (y1_s, y1_t) = anchor_self_attention(&mut tape, a_s, a_t, unit, &cfg, &mut log).unwrap();
    let (y2_s, y2_t) = anchor_cross_attention(&mut tape, y1_s, y1_t, unit, &cfg, &mut log).unwrap();
    let (y3_s, y3_t) = anchor_primary_attention(&mut tape, fs, ft, y2_s, y2_t, unit, &cfg, &mut log).unwrap();
    let (o_s, o_t) = shared_ffn(&mut tape, y3_s, y3_t, &bound.ffn).unwrap();
    assert_eq!(tape.value(o_s), &y_s);
    assert_eq!(tape.value(o_t), &y_t);
}

#[test]
fn three_unit_forward_matches_scripted_evaluation() {
    let cfg = config(4, 3);
    let p = random_params(&cfg, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let (f_s, f_t) = (random_matrix(&mut rng, 6, 4), random_matrix(&mut rng, 5, 4));
    let (idx_s, idx_t) = (vec![2, 5, 0], vec![4, 1, 3]);
    let (y_s, y_t, _, logits) = run_forward(&p, &cfg, &f_s, &f_t, &idx_s, &idx_t);

    let (fs, ft) = (oracle::of(&f_s), oracle::of(&f_t));
    let mut a_s: oracle::M = idx_s.iter().map(|&i| fs[i].clone()).collect();
    let mut a_t: oracle::M = idx_t.iter().map(|&i| ft[i].clone()).collect();
    let mut exp_logits = Vec::new();
    for u in &p.units {
        let y1_s = oracle::add(&a_s, &oracle::message(&a_s, &a_s, &u.self_proj, &u.self_out));
        let y1_t = oracle::add(&a_t, &oracle::message(&a_t, &a_t, &u.self_proj, &u.self_out));
        let y2_s = oracle::add(&y1_s, &oracle::message(&y1_s, &y1_t, &u.cross_proj, &u.cross_out));
        let y2_t = oracle::add(&y1_t, &oracle::message(&y1_t, &y1_s, &u.cross_proj, &u.cross_out));
        let prod: oracle::M = y2_s
            .iter()
            .zip(&y2_t)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
            .collect();
        exp_logits.push(oracle::lin(&prod, &u.anchor_head));
        a_s = y2_s;
        a_t = y2_t;
    }
    let last = p.units.last().unwrap();
    let y3_s = oracle::add(&fs, &oracle::message(&fs, &a_s, &last.primary_proj, &last.primary_out));
    let y3_t = oracle::add(&ft, &oracle::message(&ft, &a_t, &last.primary_proj, &last.primary_out));
    assert_close(&y_s, &oracle::ffn(&y3_s, &p.ffn), 1e-10);
    assert_close(&y_t, &oracle::ffn(&y3_t, &p.ffn), 1e-10);
    for (got, exp) in logits.iter().zip(&exp_logits) {
        assert_close(got, exp, 1e-10);
    }
}

#[test]
fn zero_initialised_forward_is_identity() {
    let cfg = config(8, 3);
    let p = ModelParams::<f64>::init(&cfg, 27).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let (f_s, f_t) = (random_matrix(&mut rng, 9, 8), random_matrix(&mut rng, 7, 8));
    let (y_s, y_t, _, _) = run_forward(&p, &cfg, &f_s, &f_t, &[0, 3, 8], &[6, 2, 0]);
    assert_eq!(y_s, f_s);
    assert_eq!(y_t, f_t);

    let every = ModelConfig {
        primary_every_unit: true,
        ..cfg.clone()
    };
    let (y_s, y_t, _, _) = run_forward(&p, &every, &f_s, &f_t, &[0, 3, 8], &[6, 2, 0]);
    assert_eq!(y_s, f_s);
    assert_eq!(y_t, f_t);
}

#[test]
fn no_attention_matrix_is_quadratic_in_points() {
    let cfg = ModelConfig {
        heads: 2,
        ..config(8, 3)
    };
    let p = random_params(&cfg, 29);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (n, m, k) = (40, 33, 4);
    let (f_s, f_t) = (random_matrix(&mut rng, n, 8), random_matrix(&mut rng, m, 8));
    let idx: Vec<usize> = (0..k).collect();
    let (_, _, log, _) = run_forward(&p, &cfg, &f_s, &f_t, &idx, &idx);
    for &(r, c) in &log.shapes {
        assert!(c == k, "attention {r}x{c} is not against the anchors");
        assert!(r == k || r == n || r == m);
    }
    assert_eq!(log.largest(), Some((n, k)));
}

#[test]
fn source_permutation_permutes_outputs_exactly() {
    let cfg = config(6, 2);
    let p = random_params(&cfg, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let n = 7;
    let (f_s, f_t) = (random_matrix(&mut rng, n, 6), random_matrix(&mut rng, 5, 6));
    let (idx_s, idx_t) = (vec![1, 4, 6], vec![0, 2, 3]);
    let perm = [3usize, 6, 0, 5, 1, 2, 4];
    let mut g_s = Matrix::zeros(n, 6);
    for i in 0..n {
        g_s.row_mut(perm[i]).copy_from_slice(f_s.row(i));
    }
    let pidx: Vec<usize> = idx_s.iter().map(|&i| perm[i]).collect();
    let (y_s, y_t, _, _) = run_forward(&p, &cfg, &f_s, &f_t, &idx_s, &idx_t);
    let (z_s, z_t, _, _) = run_forward(&p, &cfg, &g_s, &f_t, &pidx, &idx_t);
    for i in 0..n {
        assert_eq!(y_s.row(i), z_s.row(perm[i]));
    }
    assert_eq!(y_t, z_t);
}

#[test]
fn disabling_cross_attention_skips_it() {
    let cfg = ModelConfig {
        use_cross: false,
        ..config(4, 2)
    };
    let p = random_params(&cfg, 33);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let (f_s, f_t) = (random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 5, 4));
    let (_, _, log, _) = run_forward(&p, &cfg, &f_s, &f_t, &[0, 1], &[1, 0]);
    // Two self-attention calls per unit plus the final anchor-primary pair.
    assert_eq!(log.shapes.len(), 2 * 2 + 2);
}

#[test]
fn multi_head_splits_channels() {
    let cfg = ModelConfig {
        heads: 2,
        ..config(4, 1)
    };
    let p = random_params(&cfg, 35);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let a = random_matrix(&mut rng, 3, 4);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let va = tape.leaf(a.clone());
    let u = &bound.units[0];
    let mut log = AttentionLog::default();
    let msg = attention_message(&mut tape, va, va, &u.self_proj, &u.self_out, 2, &mut log).unwrap();

    // Each head attends with its own column slice and √(c/heads) scaling.
    let pu = &p.units[0];
    let ao = oracle::of(&a);
    let (q, k, v) = (
        oracle::lin(&ao, &pu.self_proj.query),
        oracle::lin(&ao, &pu.self_proj.key),
        oracle::lin(&ao, &pu.self_proj.value),
    );
    let slice = |m: &oracle::M, h: usize| -> oracle::M { m.iter().map(|r| r[h * 2..h * 2 + 2].to_vec()).collect() };
    let mut joined: oracle::M = vec![Vec::new(); 3];
    for h in 0..2 {
        let s: oracle::M = oracle::mm(&slice(&q, h), &oracle::transpose(&slice(&k, h)))
            .into_iter()
            .map(|r| r.into_iter().map(|x| x / 2f64.sqrt()).collect())
            .collect();
        let o = oracle::mm(&oracle::softmax(&s), &slice(&v, h));
        for (j, r) in o.into_iter().enumerate() {
            joined[j].extend(r);
        }
    }
    assert_close(tape.value(msg), &oracle::lin(&joined, &pu.self_out), 1e-12);
    let _ = ProjectionTriple::<f64>::clone;
}
