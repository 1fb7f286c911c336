//! `amatch`: match feature files, train on synthetic problems, evaluate,
//! benchmark and print cost formulas.

use std::path::PathBuf;
use std::process::ExitCode;

use amatformer::config::{AnchorFeatures, Config, Metric};
use amatformer::flops::{bench_config, bench_csv, bench_forward, flops_csv, flops_table, instrumented_flops, BenchMode, BenchSpec, FlopsRow};
use amatformer::io::{
    list_problems, matches_csv, metrics_csv, read_checkpoint, read_features, read_problem, write_atomic, write_checkpoint, write_json,
    write_problem, Checkpoint, MatchSummary, MetricsRow,
};
use amatformer::metrics::{nn_baseline, EvalReport};
use amatformer::model::MatchProblem;
use amatformer::params::ModelParams;
use amatformer::pipeline::match_problem;
use amatformer::synth::{derive_seed, generate};
use amatformer::train::Trainer;
use amatformer::{Error, Precision, Real, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

const GEN_STREAM: u64 = 3;

#[derive(Parser)]
#[command(name = "amatch", version, about = "Anchor-bottleneck feature matcher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match two feature files and write a match CSV plus a summary JSON.
    Match(MatchArgs),
    /// Train on synthetic problems; writes a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate every problem in a directory written by `gen`.
    Eval(EvalArgs),
    /// Time the anchor forward pass against full attention (CSV to stdout).
    Bench(BenchArgs),
    /// Print the closed-form message-passing costs (CSV to stdout).
    Flops(FlopsArgs),
    /// Export synthetic problems as feature files with ground-truth sidecars.
    Gen(GenArgs),
}

/// Config file plus flag overrides shared by several subcommands.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON config; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Anchor count k.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    anchors: Option<u64>,
    /// Processing units R.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    units: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    heads: Option<u64>,
    #[arg(long)]
    no_ffn: bool,
    #[arg(long)]
    no_cross: bool,
    /// Cosine similarity instead of the learned bilinear metric.
    #[arg(long)]
    cosine: bool,
    /// Run the ratio test on raw descriptors instead of encoded features.
    #[arg(long)]
    raw_anchors: bool,
    /// Weight of the anchor classification losses.
    #[arg(long)]
    alpha: Option<f64>,
    /// Minimum plan value of an extracted match.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Overrides {
    fn model_flags(&self) -> bool {
        self.units.is_some() || self.heads.is_some() || self.no_ffn || self.no_cross || self.cosine
    }

    /// Config file (or the checkpoint's config) with the flags applied. A
    /// checkpoint's model section always wins; model flags may not
    /// contradict it.
    fn resolve(&self, checkpoint: Option<&Config>) -> Result<Config> {
        let mut cfg = match (&self.config, checkpoint) {
            (Some(path), _) => Config::load(path)?,
            (None, Some(c)) => c.clone(),
            (None, None) => Config::default(),
        };
        if let Some(ck) = checkpoint {
            cfg.model = ck.model.clone();
        }
        let m = &mut cfg.model;
        if let Some(u) = self.units {
            m.units = u as usize;
        }
        if let Some(h) = self.heads {
            m.heads = h as usize;
        }
        if self.no_ffn {
            m.use_ffn = false;
        }
        if self.no_cross {
            m.use_cross = false;
        }
        if self.cosine {
            m.metric = Metric::Cosine;
        }
        if let Some(ck) = checkpoint {
            if self.model_flags() && cfg.model != ck.model {
                return Err(Error::Config("model flags contradict the checkpoint's model settings".into()));
            }
        }
        if let Some(k) = self.anchors {
            cfg.matching.anchors = k as usize;
        }
        if let Some(t) = self.threshold {
            cfg.matching.threshold = t;
        }
        if self.raw_anchors {
            cfg.matching.anchor_features = AnchorFeatures::Raw;
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct MatchArgs {
    source: PathBuf,
    target: PathBuf,
    /// Trained checkpoint; without one the seeded initialisation is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Match CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON path (defaults to the CSV path with a .json extension,
    /// or stderr when the CSV goes to stdout).
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "model.amck")]
    out: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct EvalArgs {
    dir: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Worker threads, capped by AMATCH_THREADS.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    anchors: u64,
    #[arg(long, default_value_t = 128)]
    c: usize,
    #[arg(long, default_value_t = 3)]
    units: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Only this mode (both when omitted).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Amatformer,
    FullAttention,
}

#[derive(Args)]
struct FlopsArgs {
    n: u64,
    k: u64,
    c: u64,
    /// Append the matmul count of an actual forward pass (two sides of `n`
    /// points, R units, FFN on).
    #[arg(long)]
    instrumented: bool,
    #[arg(long, default_value_t = 3)]
    units: usize,
}

#[derive(Args)]
struct GenArgs {
    dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    inliers: Option<usize>,
    /// Outliers per side.
    #[arg(long)]
    outliers: Option<usize>,
    /// Pixel noise on target positions.
    #[arg(long)]
    noise: Option<f64>,
    /// Per-component descriptor noise.
    #[arg(long)]
    desc_noise: Option<f64>,
    #[arg(long)]
    d_in: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

/// 2 usage/config, 3 file format, 4 shape, 5 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidWarp(_) => 2,
        Error::FileFormat(_) | Error::Io(_) | Error::Json(_) | Error::EmptyGroundTruth => 3,
        Error::ShapeMismatch(_)
        | Error::EmptySide(_)
        | Error::LengthMismatch(..)
        | Error::IndexOutOfBounds(_)
        | Error::DegenerateWidth(_)
        | Error::TooFewTargets(_)
        | Error::NoCandidates => 4,
        Error::NonFiniteLoss { .. } | Error::NonFiniteValue(_) | Error::NotScalar(..) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Match(a) => cmd_match(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("amatch: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Checkpoint parameters, or the seeded initialisation for `cfg`.
fn load_model(checkpoint: Option<&Checkpoint>, cfg: &Config) -> Result<ModelParams<f32>> {
    match checkpoint {
        Some(ck) => Ok(ck.params.clone()),
        None => ModelParams::init(&cfg.model, cfg.train.seed),
    }
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let ck = a.checkpoint.as_deref().map(read_checkpoint).transpose()?;
    let cfg = a.overrides.resolve(ck.as_ref().map(|c| &c.config))?;
    let problem = MatchProblem {
        source: read_features(&a.source)?,
        target: read_features(&a.target)?,
    };
    problem.validate()?;
    if problem.descriptor_width() != cfg.model.descriptor_dim {
        return Err(Error::ShapeMismatch(format!(
            "descriptors have width {}, the model expects {}",
            problem.descriptor_width(),
            cfg.model.descriptor_dim
        )));
    }
    let params = load_model(ck.as_ref(), &cfg)?;
    let result = match_problem(&params, &cfg.matching, &problem)?;
    let summary = MatchSummary {
        n: problem.n(),
        m: problem.m(),
        k: result.anchors.k(),
        num_matches: result.matches.len(),
        config: cfg,
    };
    let csv = matches_csv(&result.matches);
    let summary_json = serde_json::to_string_pretty(&summary)?;
    match &a.out {
        Some(out) => {
            write_atomic(out, csv.as_bytes())?;
            let path = a.summary.clone().unwrap_or_else(|| out.with_extension("json"));
            write_json(&path, &summary)?;
        }
        None => {
            print!("{csv}");
            match &a.summary {
                Some(path) => write_json(path, &summary)?,
                None => eprintln!("{summary_json}"),
            }
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let resumed = a.resume.as_deref().map(read_checkpoint).transpose()?;
    let mut cfg = a.overrides.resolve(resumed.as_ref().map(|c| &c.config))?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    match a.precision {
        Some(PrecisionArg::F32) => cfg.train.precision = Precision::F32,
        Some(PrecisionArg::F64) => cfg.train.precision = Precision::F64,
        None => {}
    }
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, resumed, &a),
        Precision::F64 => train_as::<f64>(cfg, resumed, &a),
    }
}

fn train_as<T: Real>(cfg: Config, resumed: Option<Checkpoint>, a: &TrainArgs) -> Result<()> {
    let mut trainer = match resumed {
        Some(ck) => Trainer::<T>::resume(cfg, ck.params.cast(), ck.adam.map(|s| s.cast()))?,
        None => Trainer::<T>::new(cfg)?,
    };
    let mut rows = Vec::new();
    let quiet = a.quiet;
    let outcome = trainer.run(&mut |s, held| {
        rows.push(MetricsRow {
            step: s.step,
            loss: s.loss,
            l_m: s.l_m,
            l_anchor: s.l_anchor,
            precision: held.map(|h| h.model.precision),
        });
        if let (Some(h), false) = (held, quiet) {
            eprintln!(
                "step {:>6}  loss {:>10.4}  l_m {:>9.4}  precision {:.4}  recall {:.4}  (mutual NN {:.4})",
                s.step, s.loss, s.l_m, h.model.precision, h.model.recall, h.baseline.precision
            );
        }
        Ok(())
    });
    // The log up to a failure is still useful; the checkpoint is not written.
    write_atomic(&a.metrics, metrics_csv(&rows).as_bytes())?;
    outcome?;
    let ck = Checkpoint {
        config: trainer.config.clone(),
        params: trainer.params.cast(),
        adam: Some(trainer.adam.cast::<f32>()),
    };
    write_checkpoint(&a.out, &ck)
}

#[derive(Serialize)]
struct EvalOutput {
    problems: usize,
    #[serde(flatten)]
    model: EvalReport,
    baseline: EvalReport,
    config: Config,
}

/// `requested` capped by AMATCH_THREADS when it is set to a positive number.
fn thread_cap(requested: usize) -> usize {
    let cap = std::env::var("AMATCH_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&c| c > 0);
    cap.map_or(requested, |c| requested.min(c)).max(1)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = a.checkpoint.as_deref().map(read_checkpoint).transpose()?;
    let cfg = a.overrides.resolve(ck.as_ref().map(|c| &c.config))?;
    let files = list_problems(&a.dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no problems (*.source.amft) in {}", a.dir.display())));
    }
    let params = load_model(ck.as_ref(), &cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap(a.jobs as usize))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let per_problem: Vec<(EvalReport, EvalReport)> = pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let (problem, gt) = read_problem(f)?;
                let (n, m) = (problem.n(), problem.m());
                let pred = match_problem(&params, &cfg.matching, &problem)?.matches;
                Ok((EvalReport::evaluate(&pred, &gt, n, m)?, EvalReport::evaluate(&nn_baseline(&problem), &gt, n, m)?))
            })
            .collect::<Result<_>>()
    })?;
    let (model, baseline): (Vec<_>, Vec<_>) = per_problem.into_iter().unzip();
    let output = EvalOutput {
        problems: files.len(),
        model: EvalReport::mean(&model)?,
        baseline: EvalReport::mean(&baseline)?,
        config: cfg,
    };
    match &a.out {
        Some(path) => write_json(path, &output),
        None => {
            println!("{}", serde_json::to_string_pretty(&output)?);
            Ok(())
        }
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        n: a.n,
        k: a.anchors as usize,
        c: a.c,
        units: a.units,
        warmup: a.warmup,
        reps: a.reps,
        seed: a.seed,
    };
    let modes = match a.mode {
        Some(ModeArg::Amatformer) => vec![BenchMode::Amatformer],
        Some(ModeArg::FullAttention) => vec![BenchMode::FullAttention],
        None => vec![BenchMode::Amatformer, BenchMode::FullAttention],
    };
    let reports = modes.into_iter().map(|m| bench_forward::<f32>(m, &spec)).collect::<Result<Vec<_>>>()?;
    let csv = bench_csv(&reports);
    print!("{csv}");
    if let Some(out) = &a.out {
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    if a.n == 0 || a.k == 0 || a.c == 0 {
        return Err(Error::InvalidArgument("n, k and c must be at least 1".into()));
    }
    let mut rows = flops_table(a.n, a.k, a.c);
    if a.instrumented {
        let cfg = bench_config(a.c as usize, a.units, true);
        cfg.validate()?;
        rows.push(FlopsRow {
            model: "amatformer_counted".into(),
            n: a.n,
            k: a.k,
            c: a.c,
            flops: instrumented_flops(a.n as usize, a.k as usize, &cfg)? as u128,
        });
    }
    print!("{}", flops_csv(&rows));
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = a.overrides.resolve(None)?;
    if let Some(v) = a.inliers {
        cfg.synth.n_inliers = v;
    }
    if let Some(v) = a.outliers {
        cfg.synth.n_outliers_source = v;
        cfg.synth.n_outliers_target = v;
    }
    if let Some(v) = a.noise {
        cfg.synth.noise_sigma = v;
    }
    if let Some(v) = a.desc_noise {
        cfg.synth.desc_noise_sigma = v;
    }
    if let Some(v) = a.d_in {
        cfg.model.descriptor_dim = v;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.dir)?;
    for i in 0..a.count {
        let sp = generate(&cfg.synth, cfg.model.descriptor_dim, derive_seed(cfg.train.seed, GEN_STREAM, i as u64))?;
        write_problem(&a.dir, &format!("p{i:04}"), &sp.problem, &sp.truth)?;
    }
    write_json(&a.dir.join("config.json"), &cfg)?;
    Ok(())
}
