//! Decentralized multi-arm motion planning.
//!
//! The crate covers the whole pipeline: arm kinematics and capsule collision
//! checking, multi-arm task generation, a centralized BiRRT expert, the
//! multi-agent reaching environment, an LSTM-encoder soft actor-critic
//! trainer with expert injection, and the evaluation/benchmark harness.

pub mod birrt;
pub mod collision;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod neural;
pub mod sac;
pub mod seed;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
