//! Desk-scale world-action model: one causal sequence backbone jointly
//! trained for environment dynamics (supervised) and conservative
//! distributional Q-values (TD), with a beam-search planner at decision time.
//! Everything runs on small multi-task grid environments with exact oracles.

pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod losses;
pub mod checkpoint;
pub mod pipeline;
pub mod planner;
pub mod rng;
pub mod tokenizer;

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod envs;
pub use error::{Result, WamError};
