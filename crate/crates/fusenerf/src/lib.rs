//! Differentiable multi-modal volume rendering and training.
//!
//! `fusenerf` trains a pair of factorized 3-D feature volumes with RGB,
//! thermal and event-camera supervision, entirely on the CPU and from
//! scratch: a reverse-mode tape ([`diffmath`]), coarse/fine feature fields
//! ([`field`]), a differentiable volume renderer ([`render`]), sensor
//! front-ends ([`sensors`]), the three training losses plus image metrics
//! ([`losses`], [`metrics`]), a synthetic scene generator with a closed-form
//! reference renderer ([`synth`]), and the training/evaluation pipeline with
//! its CLI ([`dataset`], [`train`], [`eval`]).
//!
//! The `book/` directory of the repository walks through each of these
//! pieces; every Rust snippet there compiles and runs as a doc-test of this
//! crate.

pub mod diffmath;
pub mod error;
pub mod field;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod render;
pub mod sensors;
pub mod synth;
pub mod dataset;
pub mod checkpoint;
pub mod train;
pub mod eval;

pub use error::{Error, Result};
