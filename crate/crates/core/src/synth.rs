//! Synthetic matching problems with exact ground truth.
//!
//! Source keypoints are uniform in a 640×480 frame. Inliers reappear in the
//! target under a known warp plus pixel noise and share a latent descriptor
//! with independent per-side perturbations; outliers are fresh on both
//! sides. Both sides are shuffled so index order carries no signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{SynthConfig, WarpRange};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{DescriptorSet, GroundTruth, ImageFeatures, KeypointSet, MatchProblem};

pub const FRAME_WIDTH: f64 = 640.0;
pub const FRAME_HEIGHT: f64 = 480.0;

/// Affine map `p ↦ A·(p − c) + c + t` about the frame centre `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

const CENTER: [f64; 2] = [FRAME_WIDTH / 2.0, FRAME_HEIGHT / 2.0];

impl Warp {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn affine(linear: [[f64; 2]; 2], translation: [f64; 2]) -> Result<Self> {
        let det = linear[0][0] * linear[1][1] - linear[0][1] * linear[1][0];
        let finite = linear.iter().flatten().chain(&translation).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidWarp("non-finite warp parameter".into()));
        }
        if det.abs() < 1e-12 {
            return Err(Error::InvalidWarp(format!("singular linear part (det {det:e})")));
        }
        Ok(Self { linear, translation })
    }

    /// Rotation by `angle` radians and uniform `scale`, then a shift.
    pub fn similarity(angle: f64, scale: f64, translation: [f64; 2]) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        Self::affine([[scale * c, -scale * s], [scale * s, scale * c]], translation)
    }

    pub fn random(range: &WarpRange, rng: &mut impl Rng) -> Result<Self> {
        let angle = symmetric(rng, range.max_rotation);
        let scale = if range.max_scale > range.min_scale {
            rng.random_range(range.min_scale..range.max_scale)
        } else {
            range.min_scale
        };
        let t = [symmetric(rng, range.max_translation), symmetric(rng, range.max_translation)];
        Self::similarity(angle, scale, t)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let d = [p[0] - CENTER[0], p[1] - CENTER[1]];
        let a = &self.linear;
        [
            a[0][0] * d[0] + a[0][1] * d[1] + CENTER[0] + self.translation[0],
            a[1][0] * d[0] + a[1][1] * d[1] + CENTER[1] + self.translation[1],
        ]
    }
}

fn symmetric(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..half_width)
    } else {
        0.0
    }
}

/// A generated problem with its ground truth and the warp that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProblem {
    pub problem: MatchProblem,
    pub truth: GroundTruth,
    pub warp: Warp,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `latent` plus independent Gaussian noise of standard deviation `sigma` on
/// every component, renormalised to unit length.
fn perturb(rng: &mut ChaCha8Rng, latent: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return latent.to_vec();
    }
    let v: Vec<f64> = latent
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            x + sigma * e
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        latent.to_vec()
    }
}

fn uniform_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(0.0..FRAME_WIDTH), rng.random_range(0.0..FRAME_HEIGHT)]
}

/// Builds one problem under a given warp. `d_in` is the descriptor width.
pub fn generate_problem(config: &SynthConfig, d_in: usize, warp: &Warp, seed: u64) -> Result<SynthProblem> {
    if config.n_inliers == 0 {
        return Err(Error::InvalidArgument("n_inliers must be at least 1".into()));
    }
    if d_in == 0 {
        return Err(Error::InvalidArgument("descriptor width must be at least 1".into()));
    }
    if !(config.noise_sigma >= 0.0 && config.desc_noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise levels must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let n_in = config.n_inliers;
    let mut src: Vec<([f64; 2], Vec<f64>)> = Vec::new();
    let mut tgt: Vec<([f64; 2], Vec<f64>)> = Vec::new();
    for _ in 0..n_in {
        let p = uniform_point(&mut rng);
        let latent = unit_vector(&mut rng, d_in);
        let w = warp.apply(p);
        let q = if config.noise_sigma > 0.0 {
            [w[0] + pixel_noise.sample(&mut rng), w[1] + pixel_noise.sample(&mut rng)]
        } else {
            w
        };
        let ds = perturb(&mut rng, &latent, config.desc_noise_sigma);
        let dt = perturb(&mut rng, &latent, config.desc_noise_sigma);
        src.push((p, ds));
        tgt.push((q, dt));
    }
    for _ in 0..config.n_outliers_source {
        let p = uniform_point(&mut rng);
        src.push((p, unit_vector(&mut rng, d_in)));
    }
    for _ in 0..config.n_outliers_target {
        let p = uniform_point(&mut rng);
        tgt.push((p, unit_vector(&mut rng, d_in)));
    }

    // perm[new] = original index
    let mut src_perm: Vec<usize> = (0..src.len()).collect();
    let mut tgt_perm: Vec<usize> = (0..tgt.len()).collect();
    src_perm.shuffle(&mut rng);
    tgt_perm.shuffle(&mut rng);
    let mut src_pos = vec![0; src.len()];
    for (new, &orig) in src_perm.iter().enumerate() {
        src_pos[orig] = new;
    }
    let mut tgt_pos = vec![0; tgt.len()];
    for (new, &orig) in tgt_perm.iter().enumerate() {
        tgt_pos[orig] = new;
    }

    let side = |points: &[([f64; 2], Vec<f64>)], perm: &[usize]| -> Result<ImageFeatures> {
        let positions = perm.iter().map(|&o| points[o].0).collect();
        let desc = Matrix::from_fn(perm.len(), d_in, |i, j| points[perm[i]].1[j]);
        ImageFeatures::new(KeypointSet::from_positions(positions), DescriptorSet(desc))
    };
    let problem = MatchProblem {
        source: side(&src, &src_perm)?,
        target: side(&tgt, &tgt_perm)?,
    };

    let mut matches: Vec<(usize, usize)> = (0..n_in).map(|k| (src_pos[k], tgt_pos[k])).collect();
    matches.sort_unstable();
    let mut unmatched_source: Vec<usize> = (n_in..src.len()).map(|k| src_pos[k]).collect();
    unmatched_source.sort_unstable();
    let mut unmatched_target: Vec<usize> = (n_in..tgt.len()).map(|k| tgt_pos[k]).collect();
    unmatched_target.sort_unstable();
    Ok(SynthProblem {
        problem,
        truth: GroundTruth {
            matches,
            unmatched_source,
            unmatched_target,
        },
        warp: *warp,
    })
}

/// Draws a warp from `config.warp` and then a problem, all from `seed`.
pub fn generate(config: &SynthConfig, d_in: usize, seed: u64) -> Result<SynthProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warp = Warp::random(&config.warp, &mut rng)?;
    generate_problem(config, d_in, &warp, rng.random())
}

/// Derives independent stream seeds from a run seed, a stream tag and an
/// index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
