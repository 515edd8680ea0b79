//! Simulator and controller workbench for fast-timescale demand response with
//! aggregated air conditioners.
//!
//! An aggregation of houses, each with one on/off AC under compressor lockout,
//! must track a second-scale power regulation signal. The crate provides the
//! physical simulator, classical controllers (bang-bang, greedy, MPC), learned
//! decentralized controllers (DQN, PPO with hand-engineered, no, or attention
//! based communication) and the benchmark tooling around them.

pub mod agents;
pub mod baselines;
pub mod bench;
pub mod control;
pub mod env;
pub mod error;
pub mod hvac;
pub mod neural;
pub mod signal;
pub mod thermal;

pub use error::{Error, Result};
