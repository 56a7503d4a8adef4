//! Delay-oriented link scheduling on conflict graphs.
//!
//! The crate covers the whole pipeline: random conflict-graph generation,
//! slotted queue simulation, the Local Greedy Solver, a small neural toolkit,
//! GCN and attention-based per-link utility estimators, zeroth-order
//! curriculum training and the evaluation harness that reports every policy
//! as a ratio to the greedy baseline.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod lgs;
pub mod models;
pub mod nn;
pub mod rng;
pub mod traffic;
pub mod train;

pub use error::{Error, Result};
