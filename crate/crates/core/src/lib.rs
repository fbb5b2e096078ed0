//! Stereo bird's-eye-view semantic layout estimation on synthetic street
//! scenes: camera geometry, a procedural stereo renderer, the network and
//! its variants, metrics, on-disk formats and the training loop.

pub mod baselines;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod network;
pub mod probe;
pub mod scenesim;
pub mod train;

pub use error::{Result, SbevError};
