//! Closed-form message-passing costs, an instrumented count of the real
//! forward pass, and wall-clock timing of anchor vs full attention.
//!
//! Counts follow the two-per-multiply-add convention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{nn_ratio_scores, select_anchors};
use crate::autodiff::Tape;
use crate::block::{forward, full_attention_forward};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ModelParams;
use crate::real::Real;

/// `2(nkc + 2k²c + nc²)`.
pub fn flops_amatformer(n: u64, k: u64, c: u64) -> u128 {
    let (n, k, c) = (n as u128, k as u128, c as u128);
    2 * (n * k * c + 2 * k * k * c + n * c * c)
}

/// `2(2nkc + 2k²c + 4kc² + 2nc²)`.
pub fn flops_sgmnet(n: u64, k: u64, c: u64) -> u128 {
    let (n, k, c) = (n as u128, k as u128, c as u128);
    2 * (2 * n * k * c + 2 * k * k * c + 4 * k * c * c + 2 * n * c * c)
}

/// `3n²c + 4nc²`.
pub fn flops_superglue(n: u64, c: u64) -> u128 {
    let (n, c) = (n as u128, c as u128);
    3 * n * n * c + 4 * n * c * c
}

/// One row of the formula table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub model: String,
    pub n: u64,
    pub k: u64,
    pub c: u64,
    pub flops: u128,
}

/// The three formula rows for one shape. SuperGlue has no anchors; its row
/// repeats `k` for alignment only.
pub fn flops_table(n: u64, k: u64, c: u64) -> Vec<FlopsRow> {
    let row = |model: &str, flops| FlopsRow {
        model: model.into(),
        n,
        k,
        c,
        flops,
    };
    vec![
        row("amatformer", flops_amatformer(n, k, c)),
        row("sgmnet", flops_sgmnet(n, k, c)),
        row("superglue", flops_superglue(n, c)),
    ]
}

pub const FLOPS_HEADER: &str = "model,n,k,c,flops";

pub fn flops_csv(rows: &[FlopsRow]) -> String {
    let mut out = format!("{FLOPS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.model, r.n, r.k, r.c, r.flops));
    }
    out
}

pub fn parse_flops_csv(text: &str) -> Result<Vec<FlopsRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != FLOPS_HEADER {
        return Err(Error::FileFormat(format!("expected header `{FLOPS_HEADER}`, found `{header}`")));
    }
    reader.deserialize().map(|r| r.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::FileFormat(format!("csv: {e}"))
}

/// Model config for benchmark shapes: `d_in = c`, one head, the rest default.
pub fn bench_config(c: usize, units: usize, use_ffn: bool) -> ModelConfig {
    ModelConfig {
        descriptor_dim: c,
        channels: c,
        units,
        use_ffn,
        ..ModelConfig::default()
    }
}

/// Seeded unit-norm rows.
pub fn random_features<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-1.0..1.0)));
    for i in 0..rows {
        let row = m.row_mut(i);
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(1e-12);
        for v in row {
            *v = T::of(v.as_f64() / norm);
        }
    }
    m
}

/// Parameters with every weight nonzero, so no product is skipped and the
/// timing matches a trained model.
fn bench_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut p = ModelParams::<T>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    p.visit_mut(&mut |m| {
        for v in m.as_mut_slice() {
            if *v == T::zero() {
                *v = T::of(rng.random_range(-0.05..0.05));
            }
        }
    });
    Ok(p)
}

/// Matmul FLOPs recorded by one forward pass (message passing and FFN, no
/// encoder or assignment) on `n` source and `n` target features with anchors
/// `0..k`.
pub fn instrumented_flops(n: usize, k: usize, config: &ModelConfig) -> Result<u64> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let params = ModelParams::<f32>::zeros(config);
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let f_s = tape.leaf(Matrix::zeros(n, config.channels));
    let f_t = tape.leaf(Matrix::zeros(n, config.channels));
    let anchors: Vec<usize> = (0..k).collect();
    tape.reset_flops();
    forward(&mut tape, f_s, f_t, &anchors, &anchors, &model, config)?;
    Ok(tape.matmul_flops())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Ratio-test anchor selection plus the anchor-bottleneck forward pass.
    Amatformer,
    /// Dense self and cross attention over all points with the same kernels.
    FullAttention,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Amatformer => "amatformer",
            BenchMode::FullAttention => "full_attention",
        }
    }

    /// Closed-form count reported next to the timing.
    pub fn formula(self, n: u64, k: u64, c: u64) -> u128 {
        match self {
            BenchMode::Amatformer => flops_amatformer(n, k, c),
            BenchMode::FullAttention => flops_superglue(n, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub units: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mode: BenchMode,
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    /// Median absolute deviation from the median.
    pub mad_ms: f64,
    pub flops_formula: u128,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

pub fn median_abs_deviation(values: &[f64]) -> f64 {
    let med = median(values);
    median(&values.iter().map(|v| (v - med).abs()).collect::<Vec<_>>())
}

fn run_once<T: Real>(mode: BenchMode, spec: &BenchSpec, config: &ModelConfig, params: &ModelParams<T>, f_s: &Matrix<T>, f_t: &Matrix<T>) -> Result<()> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let s = tape.leaf(f_s.clone());
    let t = tape.leaf(f_t.clone());
    match mode {
        BenchMode::Amatformer => {
            let candidates = nn_ratio_scores(f_s, f_t)?;
            let anchors = select_anchors(&candidates, spec.k, f_s, f_t)?;
            let out = forward(&mut tape, s, t, &anchors.source_indices, &anchors.target_indices, &model, config)?;
            std::hint::black_box(tape.value(out.y_s).get(0, 0));
        }
        BenchMode::FullAttention => {
            let (y_s, _, _) = full_attention_forward(&mut tape, s, t, &model, config)?;
            std::hint::black_box(tape.value(y_s).get(0, 0));
        }
    }
    Ok(())
}

/// Times `spec.reps` forward passes after `spec.warmup` untimed ones, on
/// the calling thread.
pub fn bench_forward<T: Real>(mode: BenchMode, spec: &BenchSpec) -> Result<TimingReport> {
    if spec.warmup == 0 || spec.reps == 0 {
        return Err(Error::InvalidArgument("warmup and reps must be at least 1".into()));
    }
    if spec.k == 0 || spec.k > spec.n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= n, got k = {}, n = {}", spec.k, spec.n)));
    }
    let config = bench_config(spec.c, spec.units, true);
    config.validate()?;
    let params = bench_params::<T>(&config, spec.seed)?;
    let f_s = random_features::<T>(spec.n, spec.c, spec.seed.wrapping_add(1));
    let f_t = random_features::<T>(spec.n, spec.c, spec.seed.wrapping_add(2));
    for _ in 0..spec.warmup {
        run_once(mode, spec, &config, &params, &f_s, &f_t)?;
    }
    let mut samples = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let start = Instant::now();
        run_once(mode, spec, &config, &params, &f_s, &f_t)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TimingReport {
        mode,
        n: spec.n,
        k: spec.k,
        c: spec.c,
        median_ms: median(&samples),
        mad_ms: median_abs_deviation(&samples),
        samples_ms: samples,
        flops_formula: mode.formula(spec.n as u64, spec.k as u64, spec.c as u64),
    })
}

pub const BENCH_HEADER: &str = "mode,n,k,c,median_ms,mad_ms,flops_formula";

pub fn bench_csv(reports: &[TimingReport]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{}\n",
            r.mode.name(),
            r.n,
            r.k,
            r.c,
            r.median_ms,
            r.mad_ms,
            r.flops_formula
        ));
    }
    out
}
