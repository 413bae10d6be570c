//! Koopman unified behavioral models.
//!
//! This crate learns linear latent dynamics over a joint action/feature
//! state from demonstration trajectories and replays them as implicit
//! planners: a single matrix generates the whole action sequence, a runtime
//! monitor compares predicted visual features against observed ones, and a
//! persistent mismatch triggers replanning from the current observation.
//!
//! Module map:
//! - [`gradkit`]: deterministic reverse-mode differentiation, Adam, clipping
//! - [`trajdata`]: demonstration datasets, first-frame augmentation, rescale
//! - [`lifting`]: hand-crafted polynomial lifts and the learned MLP encoder
//! - [`koopman`]: operator fitting (closed-form and gradient co-training)
//! - [`flowcodec`]: point-flow autoencoder used for visual features
//! - [`planner`]: rollout, monitoring, trigger logic, episode execution
//! - [`synthbench`]: synthetic coupled robot/object tasks and metrics

pub mod cli;
pub mod config;
pub mod flowcodec;
pub mod gradkit;
pub mod koopman;
pub mod lifting;
pub mod planner;
pub mod synthbench;
pub mod trajdata;
