//! Performance testing for adaptive neural networks.
//!
//! Gated reference models ([`adnn`]), FLOPs accounting ([`flops`]), a
//! generator that searches for inputs maximizing activated computation
//! ([`gan`]), a per-sample iterative baseline ([`baseline`]), measurement
//! ([`eval`]), defenses ([`mitigation`]) and a resumable pipeline ([`pipeline`]).

pub mod adnn;
pub mod arrays;
pub mod baseline;
pub mod checkpoint;
pub mod dataset;
mod error;
pub mod eval;
pub mod flops;
pub mod gan;
pub mod mitigation;
pub mod pipeline;

pub use error::{Error, Result};
