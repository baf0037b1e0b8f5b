//! Pixel-pair 6D pose regression on synthetic RGB-D scenes.
//!
//! The crate covers the full pipeline: a small reverse-mode autodiff engine
//! ([`autodiff`]), SE(3) geometry ([`se3`]), a synthetic scene generator
//! ([`synth`]), pixel-wise feature encoding with hierarchical pooling
//! ([`encoder`]), pixel-pair feature encoding and pose regression
//! ([`pairing`]), the training losses including the dense-correspondence
//! auxiliary task ([`loss`]), residual pose refinement ([`refine`]),
//! the ADD/ADD-S evaluation protocol ([`eval`]), and a deterministic
//! trainer ([`train`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pairing;
pub mod refine;
pub mod se3;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
