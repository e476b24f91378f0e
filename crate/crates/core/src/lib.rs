//! Per-frame visual budget allocation as a contextual bandit.
//!
//! A Beta-policy allocator assigns every frame of a video a resize scale.
//! It is trained with cost-aware advantage shaping against a synthetic
//! backbone whose answer quality depends on the scale of a few hidden
//! decisive frames. The crate also carries the token-budget and complexity
//! models, the temporal-similarity and concentration regularizers, the task
//! reward functions, and the experiment scenarios driven by the CLI.

pub mod budget;
pub mod capo;
pub mod config;
pub mod env;
pub mod error;
pub mod numerics;
pub mod operators;
pub mod policy;
pub mod regularizers;
pub mod report;
pub mod rewards;
pub mod scenarios;
pub mod trainer;

pub use error::{Error, Result};
