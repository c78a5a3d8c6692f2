//! Anchored 3D Gaussian splatting whose per-Gaussian colours come from
//! fusing a global appearance code, a refined code sampled from wavelet
//! sub-bands of a per-image feature map through narrow and broad frustums,
//! and a per-anchor intrinsic code. Everything is differentiated by hand in
//! 64-bit floats and checked against finite differences.

pub mod bench;
pub mod config;
pub mod encoder;
pub mod error;
pub mod hrfn;
pub mod image;
pub mod loss;
pub mod map;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod raster;
pub mod sampler;
pub mod scene;
pub mod selftest;
pub mod synth;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
