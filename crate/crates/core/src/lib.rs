//! Core numerics for a Markovian generative-modeling laboratory.
//!
//! Targets with closed-form structure, interpolation schedules and geometric
//! time grids, exact drift and score oracles, generator algebra, constrained
//! tanh networks, matching losses, samplers and the distances and bounds used
//! to cross-check all of them.

pub mod error;
pub mod generators;
pub mod linalg;
pub mod metrics;
pub mod nets;
pub mod oracles;
pub mod points;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod special;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
pub use points::Points;
