use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

/// Exponential-domain Sinkhorn on the augmented matrix, written out
/// directly: scale columns, then rows, `iters` times.
fn oracle_sinkhorn(s: &[Vec<f64>], iters: usize) -> Vec<Vec<f64>> {
    let (rows, cols) = (s.len(), s[0].len());
    let (n, m) = (rows - 1, cols - 1);
    let a: Vec<f64> = (0..rows).map(|i| if i == n { m as f64 } else { 1.0 }).collect();
    let b: Vec<f64> = (0..cols).map(|j| if j == m { n as f64 } else { 1.0 }).collect();
    let k: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
    let mut r = vec![1.0; rows];
    let mut c = vec![1.0; cols];
    for _ in 0..iters {
        for j in 0..cols {
            let t: f64 = (0..rows).map(|i| r[i] * k[i][j]).sum();
            c[j] = b[j] / t;
        }
        for i in 0..rows {
            let t: f64 = (0..cols).map(|j| k[i][j] * c[j]).sum();
            r[i] = a[i] / t;
        }
    }
    (0..rows)
        .map(|i| (0..cols).map(|j| r[i] * k[i][j] * c[j]).collect())
        .collect()
}

fn augmented(s: &Matrix<f64>, z: f64) -> Matrix<f64> {
    let mut tape = Tape::new();
    let sv = tape.leaf(s.clone());
    let zv = tape.leaf(Matrix::scalar(z));
    let out = tape.augment_dustbin(sv, zv).unwrap();
    tape.value(out).clone()
}

fn plan_of(s: &Matrix<f64>, z: f64, iters: usize) -> AssignmentMatrix<f64> {
    AssignmentMatrix::from_scores(&augmented(s, z), iters).unwrap()
}

fn similarity(ys: &Matrix<f64>, yt: &Matrix<f64>, w: &Matrix<f64>, metric: Metric) -> Result<Matrix<f64>> {
    let mut tape = Tape::new();
    let (a, b, wv) = (tape.leaf(ys.clone()), tape.leaf(yt.clone()), tape.leaf(w.clone()));
    let s = bilinear_similarity(&mut tape, a, b, wv, metric)?;
    Ok(tape.value(s).clone())
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

#[test]
fn zero_metric_gives_zero_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = similarity(&random(&mut rng, 3, 4, -1.0, 1.0), &random(&mut rng, 5, 4, -1.0, 1.0), &Matrix::zeros(4, 4), Metric::Bilinear).unwrap();
    assert_eq!(s, Matrix::zeros(3, 5));
}

#[test]
fn identity_metric_on_equal_sets_is_gram_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = random(&mut rng, 4, 3, -1.0, 1.0);
    let s = similarity(&y, &y, &Matrix::identity(3), Metric::Bilinear).unwrap();
    for i in 0..4 {
        let norm2: f64 = y.row(i).iter().map(|v| v * v).sum();
        assert!((s.get(i, i) - norm2).abs() < 1e-15);
        for j in 0..4 {
            assert_eq!(s.get(i, j), s.get(j, i));
        }
    }
}

#[test]
fn bilinear_hand_values() {
    let ys = Matrix::from_f64(2, 2, &[1.0, 2.0, 0.0, 1.0]).unwrap();
    let yt = Matrix::from_f64(2, 2, &[1.0, 0.0, 1.0, 1.0]).unwrap();
    let w = Matrix::from_f64(2, 2, &[1.0, 1.0, 0.0, 2.0]).unwrap();
    // ys·W = [[1, 5], [0, 2]], then dotted with the rows of yt.
    let s = similarity(&ys, &yt, &w, Metric::Bilinear).unwrap();
    assert_eq!(s.as_slice(), &[1.0, 6.0, 0.0, 2.0]);
}

#[test]
fn cosine_mode_ignores_metric() {
    let ys = Matrix::from_f64(1, 2, &[3.0, 4.0]).unwrap();
    let yt = Matrix::from_f64(2, 2, &[4.0, 3.0, 0.0, 2.0]).unwrap();
    let s = similarity(&ys, &yt, &Matrix::zeros(2, 2), Metric::Cosine).unwrap();
    assert!((s.get(0, 0) - 24.0 / 25.0).abs() < 1e-15);
    assert!((s.get(0, 1) - 0.8).abs() < 1e-15);
}

#[test]
fn width_mismatch_is_rejected() {
    let r = similarity(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4), &Matrix::zeros(3, 3), Metric::Bilinear);
    assert!(matches!(r, Err(Error::ShapeMismatch(_))));
}

#[test]
fn augmentation_fills_row_column_and_corner() {
    let a = augmented(&Matrix::scalar(0.7), -2.0);
    assert_eq!(a.as_slice(), &[0.7, -2.0, -2.0, -2.0]);
    assert_eq!(augmented(&Matrix::zeros(2, 3), 1.0).shape(), (3, 4));
}

#[test]
fn uniform_scores_give_uniform_real_block() {
    let p = plan_of(&Matrix::filled(2, 2, 0.3), 0.3, 10);
    let v = p.get(0, 0);
    for i in 0..2 {
        for j in 0..2 {
            assert!((p.get(i, j) - v).abs() < 1e-15);
        }
    }
}

#[test]
fn strong_diagonal_converges_to_identity() {
    let s = Matrix::from_fn(3, 3, |i, j| if i == j { 10.0 } else { 0.0 });
    let p = plan_of(&s, 0.0, 100);
    let oracle = oracle_sinkhorn(&augmented(&s, 0.0).to_f64_rows(), 100);
    for i in 0..4 {
        for j in 0..4 {
            assert!((p.get(i, j) - oracle[i][j]).abs() < 1e-9);
        }
    }
    // Under the (1, m) / (1, n) marginals the dustbins keep about 1.2% of
    // each row here, so the real block is identity only to within 1.5e-2.
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((p.get(i, j) - want).abs() < 1.5e-2, "({i},{j}) = {}", p.get(i, j));
        }
    }
}

#[test]
fn matches_exponential_oracle_on_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for iters in [1, 3, 10] {
        let s = random(&mut rng, 4, 6, -3.0, 3.0);
        let z = rng.random_range(-1.0..1.0);
        let p = plan_of(&s, z, iters);
        let oracle = oracle_sinkhorn(&augmented(&s, z).to_f64_rows(), iters);
        for i in 0..5 {
            for j in 0..7 {
                assert!((p.get(i, j) - oracle[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn very_negative_dustbin_leaves_it_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random(&mut rng, 4, 4, -2.0, 2.0);
    let p = plan_of(&s, -1e9, 200);
    // With the dustbin scored out, a square problem reduces to plain
    // doubly-stochastic scaling of exp(S).
    let plain: Vec<Vec<f64>> = {
        let k: Vec<Vec<f64>> = s.to_f64_rows().iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
        let (mut r, mut c) = (vec![1.0; 4], vec![1.0; 4]);
        for _ in 0..200 {
            for j in 0..4 {
                c[j] = 1.0 / (0..4).map(|i| r[i] * k[i][j]).sum::<f64>();
            }
            for i in 0..4 {
                r[i] = 1.0 / (0..4).map(|j| k[i][j] * c[j]).sum::<f64>();
            }
        }
        (0..4).map(|i| (0..4).map(|j| r[i] * k[i][j] * c[j]).collect()).collect()
    };
    for i in 0..4 {
        // The dustbin column drains only sublinearly, since the limit sits on
        // the boundary of the feasible set.
        assert!(p.get(i, 4) < 1e-2 && p.get(4, i) < 1e-12);
        for j in 0..4 {
            assert!((p.get(i, j) - plain[i][j]).abs() < 1e-2);
        }
    }
}

#[test]
fn one_iteration_leaves_rows_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = plan_of(&random(&mut rng, 5, 3, -5.0, 5.0), 0.4, 1);
    for s in p.row_sums() {
        assert!((s - 1.0).abs() < 1e-14);
    }
}

#[test]
fn zero_iterations_are_rejected() {
    assert!(AssignmentMatrix::<f64>::from_scores(&Matrix::zeros(3, 3), 0).is_err());
}

#[test]
fn sinkhorn_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random(&mut rng, 4, 5, -2.0, 2.0);
    let z = Matrix::scalar(0.5);
    let weights = random(&mut rng, 5, 6, -1.0, 1.0);
    let report = grad_check(
        |tape, v| {
            let aug = tape.augment_dustbin(v[0], v[1])?;
            let p = sinkhorn(tape, aug, 10)?;
            let w = tape.leaf(weights.clone());
            let prod = tape.mul(p, w)?;
            Ok(tape.sum(prod))
        },
        &[s, z],
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn identity_like_plan_matches_diagonal() {
    let s = Matrix::from_fn(4, 4, |i, j| if i == j { 8.0 } else { 0.0 });
    let matches = extract_matches(&plan_of(&s, 0.0, 20), 0.2);
    let pairs: Vec<(usize, usize)> = matches.iter().map(|c| (c.source, c.target)).collect();
    assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
}

#[test]
fn uniform_plan_has_no_matches() {
    let plan = AssignmentMatrix::new(Matrix::filled(4, 4, 0.25)).unwrap();
    assert!(extract_matches(&plan, 0.2).is_empty());
}

fn brute_force_matches(p: &Matrix<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let (n, m) = (p.rows() - 1, p.cols() - 1);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let v = p.get(i, j);
            let row_ok = (0..m).all(|jj| jj == j || p.get(i, jj) < v);
            let col_ok = (0..n).all(|ii| ii == i || p.get(ii, j) < v);
            if row_ok && col_ok && v >= threshold {
                out.push((i, j));
            }
        }
    }
    out
}

#[test]
fn random_plan_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let plan = AssignmentMatrix::new(random(&mut rng, 5, 5, 0.0, 1.0)).unwrap();
        let got: Vec<(usize, usize)> = extract_matches(&plan, 0.2).iter().map(|c| (c.source, c.target)).collect();
        assert_eq!(got, brute_force_matches(plan.plan(), 0.2));
    }
}

#[test]
fn ties_are_not_matches() {
    let plan = AssignmentMatrix::new(Matrix::<f64>::from_f64(3, 3, &[0.5, 0.5, 0.0, 0.1, 0.2, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    // Row 0 has no strict maximum; row 1 peaks at column 1 but column 1 peaks at row 0.
    assert!(extract_matches(&plan, 0.0).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn converged_marginals(seed in any::<u64>(), n in 1usize..10, m in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = plan_of(&random(&mut rng, n, m, -5.0, 5.0), 0.0, 100);
        for s in p.row_sums().into_iter().chain(p.col_sums()) {
            prop_assert!((s - 1.0).abs() < 1e-6, "sum {}", s);
        }
    }

    #[test]
    fn raising_a_score_never_lowers_its_entry(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, bump in 0.01f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random(&mut rng, n, m, -2.0, 2.0);
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..m));
        let mut raised = s.clone();
        raised.set(i, j, s.get(i, j) + bump);
        let before = plan_of(&s, 0.0, 100).get(i, j);
        let after = plan_of(&raised, 0.0, 100).get(i, j);
        prop_assert!(after >= before - 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn extracted_matches_are_one_to_one(seed in any::<u64>(), n in 1usize..8, m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = plan_of(&random(&mut rng, n, m, -3.0, 3.0), 0.0, 10);
        let matches = extract_matches(&p, 0.0);
        let mut src: Vec<usize> = matches.iter().map(|c| c.source).collect();
        let mut tgt: Vec<usize> = matches.iter().map(|c| c.target).collect();
        src.dedup();
        tgt.sort_unstable();
        tgt.dedup();
        prop_assert_eq!(src.len(), matches.len());
        prop_assert_eq!(tgt.len(), matches.len());
    }
}
