//! Per-video test-time-trained point tracking.

pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod flowsup;
pub mod media;
pub mod miner;
pub mod nn;
pub mod objective;
pub mod occlusion;
pub mod pipeline;
pub mod synthetic;
pub mod tracker;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use vidtrack_core as core;
