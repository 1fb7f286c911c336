//! Anchor-bottleneck transformer for sparse feature matching.
//!
//! The pipeline: [`encoder`] fuses descriptors and keypoint positions,
//! [`anchor`] picks `k` reliable ratio-test correspondences, [`block`] runs
//! anchor self/cross attention and feeds the anchors back to every point
//! through an `n×k` bottleneck, then [`assignment`] scores pairs with a
//! bilinear metric and normalises them with log-domain Sinkhorn.
//! [`pipeline`] strings these together, [`train`] fits the whole stack on
//! [`synth`] problems and [`flops`] compares its cost with full attention.

pub mod anchor;
pub mod assignment;
pub mod autodiff;
pub mod block;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use real::{Precision, Real};
