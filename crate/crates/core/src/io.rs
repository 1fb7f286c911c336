//! On-disk formats: feature files, ground-truth sidecars, checkpoints,
//! match and metrics tables. All writers go through [`write_atomic`].
//!
//! Feature file (little-endian): `"AMFT"`, `u16` version 1, `u32 n`,
//! `u32 d_in`, then `n` records of `f32 x, f32 y, f32 score` followed by
//! `d_in` `f32` descriptor values. A JSON mirror with the same field names
//! is accepted wherever a feature file is read.
//!
//! Checkpoint (little-endian): `"AMCK"`, `u16` version 1, `u32` length and
//! the run config as JSON, `u32` tensor count, then per tensor `u32 rows`,
//! `u32 cols` and `rows·cols` `f32` values in [`ModelParams::visit`] order.
//! A trailing `u8` flags optimiser state; when 1 it is followed by the
//! `u64` Adam step and the first then second moments, values only, in the
//! same order and shapes as the parameters.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Correspondence, DescriptorSet, GroundTruth, ImageFeatures, KeypointSet, MatchProblem};
use crate::params::ModelParams;
use crate::train::AdamState;

pub const FEATURE_MAGIC: &[u8; 4] = b"AMFT";
pub const FEATURE_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Writes to a temporary file in the destination directory, then renames
/// it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Little-endian cursor that reports truncation as a format error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::FileFormat(format!("{} truncated at byte {}", self.what, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::FileFormat(format!("{} size overflows", self.what)))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4"))).collect())
    }

    fn header(&mut self, magic: &[u8; 4], version: u16) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::FileFormat(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::FileFormat(format!("{}: unsupported version {v}, expected {version}", self.what)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::FileFormat(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn u32_len(len: usize, what: &str) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::InvalidArgument(format!("{what} {len} does not fit in u32")))
}

/// Binary feature file bytes. Values are stored as `f32`.
pub fn encode_features(features: &ImageFeatures) -> Result<Vec<u8>> {
    let n = features.len();
    let d = features.descriptors.width();
    let mut out = Vec::with_capacity(14 + n * (3 + d) * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(n, "point count")?.to_le_bytes());
    out.extend_from_slice(&u32_len(d, "descriptor width")?.to_le_bytes());
    let kp = &features.keypoints;
    for i in 0..n {
        let [x, y] = kp.positions()[i];
        put_f32s(&mut out, [x as f32, y as f32, kp.scores()[i] as f32]);
        put_f32s(&mut out, features.descriptors.0.row(i).iter().map(|&v| v as f32));
    }
    Ok(out)
}

pub fn decode_features_binary(bytes: &[u8]) -> Result<ImageFeatures> {
    let mut r = Reader::new(bytes, "feature file");
    r.header(FEATURE_MAGIC, FEATURE_VERSION)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let record = d.checked_add(3).and_then(|w| w.checked_mul(4)).ok_or_else(|| Error::FileFormat("descriptor width overflows".into()))?;
    if n.checked_mul(record).is_none_or(|total| total != bytes.len() - r.pos) {
        return Err(Error::FileFormat(format!(
            "feature file: header says {n} records of width {d} but {} payload bytes follow",
            bytes.len() - r.pos
        )));
    }
    let mut positions = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut desc = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (x, y, s) = (r.f32()?, r.f32()?, r.f32()?);
        positions.push([x as f64, y as f64]);
        scores.push(s as f64);
        desc.extend(r.f32s(d)?.into_iter().map(f64::from));
    }
    r.finish()?;
    ImageFeatures::new(KeypointSet::new(positions, scores)?, DescriptorSet(Matrix::from_vec(n, d, desc)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    x: f64,
    y: f64,
    #[serde(default = "default_score")]
    score: f64,
    descriptor: Vec<f64>,
}

fn default_score() -> f64 {
    1.0
}

fn default_version() -> u16 {
    FEATURE_VERSION
}

/// JSON mirror of the binary feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureJson {
    #[serde(default = "default_version")]
    version: u16,
    n: usize,
    d_in: usize,
    records: Vec<FeatureRecord>,
}

pub fn features_to_json(features: &ImageFeatures) -> String {
    let kp = &features.keypoints;
    let doc = FeatureJson {
        version: FEATURE_VERSION,
        n: features.len(),
        d_in: features.descriptors.width(),
        records: (0..features.len())
            .map(|i| FeatureRecord {
                x: kp.positions()[i][0],
                y: kp.positions()[i][1],
                score: kp.scores()[i],
                descriptor: features.descriptors.0.row(i).to_vec(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("features serialise");
    text.push('\n');
    text
}

pub fn decode_features_json(text: &str) -> Result<ImageFeatures> {
    let doc: FeatureJson = serde_json::from_str(text)
        .map_err(|e| Error::FileFormat(format!("feature JSON line {} column {}: {e}", e.line(), e.column())))?;
    if doc.version != FEATURE_VERSION {
        return Err(Error::FileFormat(format!("feature JSON: unsupported version {}", doc.version)));
    }
    if doc.records.len() != doc.n {
        return Err(Error::ShapeMismatch(format!("feature JSON: n = {} but {} records", doc.n, doc.records.len())));
    }
    if let Some(i) = doc.records.iter().position(|r| r.descriptor.len() != doc.d_in) {
        return Err(Error::ShapeMismatch(format!(
            "feature JSON: record {i} has {} descriptor values, d_in = {}",
            doc.records[i].descriptor.len(),
            doc.d_in
        )));
    }
    let positions = doc.records.iter().map(|r| [r.x, r.y]).collect();
    let scores = doc.records.iter().map(|r| r.score).collect();
    let desc = doc.records.iter().flat_map(|r| r.descriptor.iter().copied()).collect();
    ImageFeatures::new(KeypointSet::new(positions, scores)?, DescriptorSet(Matrix::from_vec(doc.n, doc.d_in, desc)?))
}

/// Binary when the bytes start with the feature magic, JSON when they start
/// with `{`, an error otherwise.
pub fn decode_features(bytes: &[u8]) -> Result<ImageFeatures> {
    if bytes.starts_with(FEATURE_MAGIC) {
        return decode_features_binary(bytes);
    }
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'{') {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::FileFormat(format!("feature JSON is not UTF-8: {e}")))?;
        return decode_features_json(text);
    }
    let head = &bytes[..bytes.len().min(4)];
    Err(Error::FileFormat(format!(
        "not a feature file: starts with {:?}, expected \"AMFT\" or a JSON object",
        String::from_utf8_lossy(head)
    )))
}

pub fn read_features(path: &Path) -> Result<ImageFeatures> {
    decode_features(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn write_features(path: &Path, features: &ImageFeatures) -> Result<()> {
    write_atomic(path, &encode_features(features)?)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::FileFormat(msg) => Error::FileFormat(format!("{}: {msg}", path.display())),
        Error::ShapeMismatch(msg) => Error::ShapeMismatch(format!("{}: {msg}", path.display())),
        other => other,
    }
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::FileFormat(format!("{}: {e}", path.display())))
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut text = serde_json::to_string(gt)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Parameters, run config and optional optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    if ck.params.config != ck.config.model {
        return Err(Error::Config("checkpoint parameters were built for a different model config".into()));
    }
    let config = ck.config.to_json();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(config.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let tensors = ck.params.tensors();
    out.extend_from_slice(&u32_len(tensors.len(), "tensor count")?.to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&u32_len(t.rows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&u32_len(t.cols(), "cols")?.to_le_bytes());
        put_f32s(&mut out, t.as_slice().iter().copied());
    }
    match &ck.adam {
        None => out.push(0),
        Some(a) => {
            let fits = |ms: &[Matrix<f32>]| ms.len() == tensors.len() && ms.iter().zip(&tensors).all(|(m, t)| m.shape() == t.shape());
            if !fits(&a.m) || !fits(&a.v) {
                return Err(Error::ShapeMismatch("optimizer state does not fit the parameters".into()));
            }
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for m in a.m.iter().chain(&a.v) {
                put_f32s(&mut out, m.as_slice().iter().copied());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::FileFormat(format!("checkpoint config is not UTF-8: {e}")))?;
    let config = Config::from_json(text)?;
    let mut params = ModelParams::<f32>::zeros(&config.model);
    let count = r.u32()? as usize;
    if count != params.tensor_count() {
        return Err(Error::FileFormat(format!(
            "checkpoint holds {count} tensors, its config implies {}",
            params.tensor_count()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let size = rows.checked_mul(cols).ok_or_else(|| Error::FileFormat("tensor size overflows".into()))?;
        tensors.push(Matrix::from_vec(rows, cols, r.f32s(size)?)?);
    }
    params.load_tensors(tensors).map_err(|e| Error::FileFormat(format!("checkpoint tensors: {e}")))?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
            let mut moments = || -> Result<Vec<Matrix<f32>>> {
                shapes.iter().map(|&(rows, cols)| Matrix::from_vec(rows, cols, r.f32s(rows * cols)?)).collect()
            };
            let m = moments()?;
            let v = moments()?;
            Some(AdamState { step, m, v })
        }
        flag => return Err(Error::FileFormat(format!("checkpoint: bad optimizer flag {flag}"))),
    };
    r.finish()?;
    Ok(Checkpoint { config, params, adam })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub const MATCH_HEADER: &str = "source_index,target_index,confidence";

pub fn matches_csv(matches: &[Correspondence]) -> String {
    let mut out = format!("{MATCH_HEADER}\n");
    for c in matches {
        out.push_str(&format!("{},{},{}\n", c.source, c.target, c.confidence));
    }
    out
}

pub fn parse_matches_csv(text: &str) -> Result<Vec<Correspondence>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != MATCH_HEADER {
        return Err(Error::FileFormat(format!("expected header `{MATCH_HEADER}`, found `{header}`")));
    }
    reader
        .deserialize::<(usize, usize, f64)>()
        .map(|r| {
            let (source, target, confidence) = r.map_err(csv_error)?;
            Ok(Correspondence { source, target, confidence })
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::FileFormat(format!("csv: {e}"))
}

/// Companion of a match CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub num_matches: usize,
    pub config: Config,
}

/// One line of the training log; `precision` only on evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub l_m: f64,
    pub l_anchor: f64,
    pub precision: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,l_m,l_anchor,precision";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let p = r.precision.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{p}\n", r.step, r.loss, r.l_m, r.l_anchor));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(Error::FileFormat(format!("expected header `{METRICS_HEADER}`, found `{header}`")));
    }
    reader.deserialize().map(|r| r.map_err(csv_error)).collect()
}

/// File names of one exported problem inside a problem directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemFiles {
    pub stem: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub truth: PathBuf,
}

impl ProblemFiles {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            stem: stem.to_string(),
            source: dir.join(format!("{stem}.source.amft")),
            target: dir.join(format!("{stem}.target.amft")),
            truth: dir.join(format!("{stem}.gt.json")),
        }
    }
}

pub fn write_problem(dir: &Path, stem: &str, problem: &MatchProblem, gt: &GroundTruth) -> Result<ProblemFiles> {
    let files = ProblemFiles::new(dir, stem);
    write_features(&files.source, &problem.source)?;
    write_features(&files.target, &problem.target)?;
    write_ground_truth(&files.truth, gt)?;
    Ok(files)
}

/// Every `<stem>.source.amft` in `dir` with its target and sidecar, sorted
/// by stem.
pub fn list_problems(dir: &Path) -> Result<Vec<ProblemFiles>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".source.amft")) {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems.iter().map(|s| ProblemFiles::new(dir, s)).collect())
}

pub fn read_problem(files: &ProblemFiles) -> Result<(MatchProblem, GroundTruth)> {
    let problem = MatchProblem {
        source: read_features(&files.source)?,
        target: read_features(&files.target)?,
    };
    problem.validate()?;
    let gt = read_ground_truth(&files.truth)?;
    gt.validate(problem.n(), problem.m())?;
    Ok((problem, gt))
}
