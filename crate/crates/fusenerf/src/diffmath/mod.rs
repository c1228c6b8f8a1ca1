//! Reverse-mode differentiable numeric core.
//!
//! Everything trainable in the crate is built from four pieces:
//!
//! * [`ParameterStore`] — named dense arrays with same-shaped gradient
//!   buffers,
//! * [`Tape`] — operations recorded in execution order and replayed in
//!   reverse by [`Tape::backward`],
//! * [`Mlp`] — small fully-connected heads over tape buffers,
//! * [`AdamState`] — bias-corrected Adam updates over the whole store.
//!
//! The [`gradcheck`] module holds the central finite-difference oracle used
//! throughout the test suites.

mod adam;
pub mod gradcheck;
mod mlp;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use mlp::Mlp;
pub use params::{ParamId, ParameterStore};
pub use tape::{sigmoid, softplus, Activation, BufId, CpLookup, Tape, TrilinearLookup};
