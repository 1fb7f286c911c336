//! Hyperparameters. Every field has a default, so a config file only needs
//! the values it changes; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `S(i, j) = y_s(i) · W · y_t(j)ᵀ` with learnable `W`.
    Bilinear,
    /// Dot products of L2-normalised rows; `W` is ignored.
    Cosine,
}

/// Which descriptors the ratio test compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorFeatures {
    Encoded,
    Raw,
}

/// How anchor pairs are labelled for the per-unit classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Membership of the pair in the ground-truth set.
    Exact,
    /// Reprojection distance under the known warp below `tau` pixels.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw descriptor width `d_in`.
    pub descriptor_dim: usize,
    /// Model channel width `c`.
    pub channels: usize,
    pub position_hidden: usize,
    /// Number of processing units `R`.
    pub units: usize,
    pub heads: usize,
    /// FFN inner width as a multiple of `c`.
    pub ffn_expansion: usize,
    pub use_ffn: bool,
    pub use_cross: bool,
    pub share_self_projections: bool,
    pub primary_every_unit: bool,
    pub metric: Metric,
    pub use_keypoint_scores: bool,
    pub normalize_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            descriptor_dim: 128,
            channels: 128,
            position_hidden: 32,
            units: 3,
            heads: 1,
            ffn_expansion: 4,
            use_ffn: true,
            use_cross: true,
            share_self_projections: true,
            primary_every_unit: false,
            metric: Metric::Bilinear,
            use_keypoint_scores: true,
            normalize_positions: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.descriptor_dim == 0 || self.channels == 0 || self.position_hidden == 0 {
            return bad("descriptor_dim, channels and position_hidden must be positive".into());
        }
        if self.units == 0 {
            return bad("units must be at least 1".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "heads = {} must divide channels = {}",
                self.heads, self.channels
            ));
        }
        if self.use_ffn && (self.channels < 2 || self.ffn_expansion == 0) {
            return bad("FFN needs channels >= 2 and ffn_expansion >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Anchor count `k`.
    pub anchors: usize,
    pub sinkhorn_iters: usize,
    pub threshold: f64,
    pub anchor_features: AnchorFeatures,
    pub mutual_anchor_filter: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            anchors: 128,
            sinkhorn_iters: 10,
            threshold: 0.2,
            anchor_features: AnchorFeatures::Encoded,
            mutual_anchor_filter: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors == 0 {
            return Err(Error::Config("anchors must be at least 1".into()));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("sinkhorn_iters must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Parameters of the similarity warp applied to generate target positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpRange {
    /// Maximum absolute rotation in radians.
    pub max_rotation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Maximum absolute translation in pixels per axis.
    pub max_translation: f64,
}

impl Default for WarpRange {
    fn default() -> Self {
        Self {
            max_rotation: 0.3,
            min_scale: 0.8,
            max_scale: 1.25,
            max_translation: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_inliers: usize,
    pub n_outliers_source: usize,
    pub n_outliers_target: usize,
    /// Pixel noise on warped target positions.
    pub noise_sigma: f64,
    /// Per-component standard deviation of the per-side descriptor noise.
    pub desc_noise_sigma: f64,
    pub warp: WarpRange,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_inliers: 48,
            n_outliers_source: 16,
            n_outliers_target: 16,
            noise_sigma: 1.0,
            desc_noise_sigma: 0.3,
            warp: WarpRange::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Linearly decay the learning rate to zero over `steps`.
    pub lr_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the per-unit anchor classification losses.
    pub alpha: f64,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_problems: usize,
    pub label_mode: LabelMode,
    /// Reprojection threshold in pixels for geometric anchor labels.
    pub tau: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 2000,
            lr: 1e-3,
            lr_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            alpha: 250.0,
            grad_clip: 10.0,
            eval_interval: 100,
            eval_problems: 64,
            label_mode: LabelMode::Geometric,
            tau: 3.0,
            precision: Precision::F32,
        }
    }
}

/// Everything a run needs; echoed verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub matching: MatchConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Config {
    /// Small shapes used for desk-scale training runs.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model.descriptor_dim = 32;
        cfg.model.channels = 32;
        cfg.model.units = 2;
        cfg.matching.anchors = 16;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.matching.validate()?;
        if self.synth.n_inliers == 0 {
            return Err(Error::Config("synth.n_inliers must be at least 1".into()));
        }
        if self.train.lr < 0.0 || !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}
