//! Fuses raw descriptors and keypoint geometry into `c`-wide features.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{FeatureSet, ImageFeatures, KeypointSet};
use crate::params::{BoundEncoder, ModelParams};
use crate::real::Real;

/// Position MLP input rows `(x, y, score)`.
///
/// With `normalize` set, coordinates are centred on the keypoint bounding
/// box and divided by half its longer side, so they land in `[-1, 1]`.
/// A missing score channel is fed as zero.
pub fn position_inputs<T: Real>(kp: &KeypointSet, normalize: bool, use_scores: bool) -> Matrix<T> {
    let (center, scale) = if normalize {
        extent(kp.positions())
    } else {
        ([0.0, 0.0], 1.0)
    };
    Matrix::from_fn(kp.len(), 3, |i, j| {
        let v = match j {
            0 | 1 => (kp.positions()[i][j] - center[j]) / scale,
            _ if use_scores => kp.scores()[i],
            _ => 0.0,
        };
        T::of(v)
    })
}

/// Centre and half of the longer side of the bounding box.
fn extent(points: &[[f64; 2]]) -> ([f64; 2], f64) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = ((hi[0] - lo[0]).max(hi[1] - lo[1])) / 2.0;
    (center, if half > 0.0 { half } else { 1.0 })
}

/// `F = descriptors·W_d + b_d + MLP(x, y, score)` on the tape.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    image: &ImageFeatures,
    enc: &BoundEncoder,
    config: &ModelConfig,
) -> Result<Var> {
    if image.keypoints.len() != image.descriptors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} keypoints but {} descriptors",
            image.keypoints.len(),
            image.descriptors.len()
        )));
    }
    if image.descriptors.width() != config.descriptor_dim {
        return Err(Error::ShapeMismatch(format!(
            "descriptor width {} but the model expects {}",
            image.descriptors.width(),
            config.descriptor_dim
        )));
    }
    let desc = tape.leaf(image.descriptors.0.cast());
    let visual = enc.descriptor.apply(tape, desc)?;
    let pos = tape.leaf(position_inputs(
        &image.keypoints,
        config.normalize_positions,
        config.use_keypoint_scores,
    ));
    let hidden = enc.position_hidden.apply(tape, pos)?;
    let hidden = tape.relu(hidden);
    let positional = enc.position_out.apply(tape, hidden)?;
    tape.add(visual, positional)
}

/// Tape-free convenience wrapper around [`encode`].
pub fn encode_features<T: Real>(params: &ModelParams<T>, image: &ImageFeatures) -> Result<FeatureSet<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let f = encode(&mut tape, image, &bound.encoder, &params.config)?;
    FeatureSet::new(tape.value(f).clone())
}
