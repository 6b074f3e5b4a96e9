//! Per-turn reward decomposition for long-form dialogue.
//!
//! A dialogue session carries a single global score. This crate splits that
//! score into per-turn rewards (through a prompted chat oracle or classical
//! return-decomposition baselines), distills the per-turn rewards into a
//! text-only reward function, and scores decompositions with the global-loss,
//! local-difference and two-sample consistency metrics. A toy KL-regularized
//! policy optimizer closes the loop against a learned reward function.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the HTTP
//! oracle client and the command line live in the `geli` companion crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

mod error;
mod math;

pub mod baselines;
pub mod corpus;
pub mod decompose;
pub mod descriptors;
pub mod metrics;
pub mod reward_model;
pub mod rl;
pub mod synthetic;

pub use error::{Error, Result};
