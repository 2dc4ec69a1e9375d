//! Derivative-free tuning of per-layer deep prompts.
//!
//! Each layer's prompt is generated from a low-dimensional intrinsic vector
//! through a frozen random projection. One CMA-ES instance per layer searches
//! its vector, and a [`scheduler::Scheduler`] coordinates the optimizers with
//! one of three strategies: divide-and-conquer, all-in-time or rolling.

pub mod blackbox;
pub mod cmaes;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod mtl;
pub mod prompt;
pub mod rng;
pub mod scheduler;
pub mod verbalizer;

pub use error::{Error, Result};
pub use rng::RngStream;
