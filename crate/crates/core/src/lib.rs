//! Tri-plane radiance fields for progressive scene generation.
//!
//! The pipeline: build a supporting database of keyframes by forward-warping
//! an initial RGB-D view into spherical neighbors, fit a tri-plane radiance
//! field to it, then walk a camera trajectory, rendering each new view,
//! passing it through a pluggable [`refine::Refiner`], appending the result to
//! the database and training incrementally. A procedural scene oracle
//! ([`synth`]) supplies ground truth for tests and evaluation.

pub mod camera;
pub mod cli;
pub mod dibr;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod refine;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
