//! Domain types shared across the pipeline.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Keypoint pixel coordinates plus a detector confidence per point.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    positions: Vec<[f64; 2]>,
    scores: Vec<f64>,
}

impl KeypointSet {
    pub fn new(positions: Vec<[f64; 2]>, scores: Vec<f64>) -> Result<Self> {
        if positions.len() != scores.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions but {} scores",
                positions.len(),
                scores.len()
            )));
        }
        Ok(Self { positions, scores })
    }

    /// Keypoints without a detector score; the score channel defaults to 1.
    pub fn from_positions(positions: Vec<[f64; 2]>) -> Self {
        let scores = vec![1.0; positions.len()];
        Self { positions, scores }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Raw descriptors, one row per keypoint (`count × d_in`).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet(pub Matrix<f64>);

impl DescriptorSet {
    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Keypoints and descriptors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub keypoints: KeypointSet,
    pub descriptors: DescriptorSet,
}

impl ImageFeatures {
    pub fn new(keypoints: KeypointSet, descriptors: DescriptorSet) -> Result<Self> {
        let f = Self {
            keypoints,
            descriptors,
        };
        f.check("features")?;
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    fn check(&self, side: &str) -> Result<()> {
        if self.keypoints.is_empty() {
            return Err(Error::EmptySide(format!("{side} has no keypoints")));
        }
        if self.descriptors.len() != self.keypoints.len() {
            return Err(Error::ShapeMismatch(format!(
                "{side}: {} keypoints but {} descriptor rows",
                self.keypoints.len(),
                self.descriptors.len()
            )));
        }
        if let Some(i) = self
            .keypoints
            .positions
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::NonFiniteValue(format!("{side} keypoint {i} position")));
        }
        if let Some(i) = self.keypoints.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteValue(format!("{side} keypoint {i} score")));
        }
        if let Some(i) = self
            .keypoints
            .scores
            .iter()
            .position(|s| !(0.0..=1.0).contains(s))
        {
            return Err(Error::InvalidArgument(format!(
                "{side} keypoint {i} score {} outside [0, 1]",
                self.keypoints.scores[i]
            )));
        }
        if let Some(e) = self.descriptors.0.as_slice().iter().position(|v| !v.is_finite()) {
            let w = self.descriptors.width().max(1);
            return Err(Error::NonFiniteValue(format!(
                "{side} descriptor row {} column {}",
                e / w,
                e % w
            )));
        }
        Ok(())
    }
}

/// Two images to be matched: `n` source points and `m` target points.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProblem {
    pub source: ImageFeatures,
    pub target: ImageFeatures,
}

impl MatchProblem {
    pub fn n(&self) -> usize {
        self.source.len()
    }

    pub fn m(&self) -> usize {
        self.target.len()
    }

    pub fn descriptor_width(&self) -> usize {
        self.source.descriptors.width()
    }

    /// Checks every structural invariant downstream stages rely on.
    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 || self.m() == 0 {
            return Err(Error::EmptySide(format!("n = {}, m = {}", self.n(), self.m())));
        }
        self.source.check("source")?;
        self.target.check("target")?;
        let (ds, dt) = (self.source.descriptors.width(), self.target.descriptors.width());
        if ds != dt {
            return Err(Error::ShapeMismatch(format!(
                "descriptor widths differ: source {ds}, target {dt}"
            )));
        }
        if ds == 0 {
            return Err(Error::ShapeMismatch("descriptor width is 0".into()));
        }
        Ok(())
    }
}

/// Encoded per-point features (`count × c`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T>(pub Matrix<T>);

impl<T: Real> FeatureSet<T> {
    pub fn new(m: Matrix<T>) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFiniteValue("feature matrix".into()));
        }
        Ok(Self(m))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.cols()
    }
}

/// Ground-truth correspondences and the points that have none.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "T")]
    pub matches: Vec<(usize, usize)>,
    #[serde(rename = "U_s")]
    pub unmatched_source: Vec<usize>,
    #[serde(rename = "U_t")]
    pub unmatched_target: Vec<usize>,
}

impl GroundTruth {
    /// Every source index in `0..n` must appear exactly once across the
    /// first components of `matches` and `unmatched_source`; likewise for
    /// targets.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let side = |name: &str, count: usize, from_t: Vec<usize>, unmatched: &[usize]| {
            let mut seen = vec![false; count];
            for i in from_t.into_iter().chain(unmatched.iter().copied()) {
                if i >= count {
                    return Err(Error::IndexOutOfBounds(format!(
                        "{name} index {i} with {count} points"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!(
                        "{name} index {i} listed twice in ground truth"
                    )));
                }
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(Error::InvalidArgument(format!(
                    "{name} index {i} missing from ground truth"
                )));
            }
            Ok(())
        };
        side(
            "source",
            n,
            self.matches.iter().map(|p| p.0).collect(),
            &self.unmatched_source,
        )?;
        side(
            "target",
            m,
            self.matches.iter().map(|p| p.1).collect(),
            &self.unmatched_target,
        )
    }

    pub fn match_set(&self) -> HashSet<(usize, usize)> {
        self.matches.iter().copied().collect()
    }
}

/// One predicted correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub confidence: f64,
}
