//! Slotted simulator for VIP-based forwarding, caching and congestion
//! control in Named Data Networking, with classic caching baselines.

// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actual_plane;
pub mod baselines;
pub mod config;
pub mod congestion;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod sim;
pub mod topology;
pub mod traffic;
pub mod virtual_plane;

pub use baselines::Algorithm;
pub use config::ExperimentConfig;
pub use harness::{run_experiment, write_csv, RunRecord};
