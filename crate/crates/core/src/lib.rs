//! Discovery of ODE right-hand sides from sparsely sampled state pairs.
//!
//! A feed-forward network `N_F(Φ, t)` stands in for the unknown field. It is
//! trained by unrolling an explicit integrator across each data pair's time
//! lag, split into `M` sub-segments, and minimising the squared mismatch
//! with the observed end state.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
#[cfg(feature = "cli")]
pub mod cli;
mod clock;
pub mod error;
pub mod evaluate;
pub mod field;
pub mod io;
pub mod network;
pub mod optimize;
pub mod residual;
pub mod systems;

pub use error::{Error, Result};
