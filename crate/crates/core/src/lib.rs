//! Hierarchical budget policy optimization on a synthetic reasoning-length
//! environment.
//!
//! A tabular length policy learns, from budget-conditioned rollouts and a
//! budget-aware piecewise reward, to spend more tokens on harder problems.

pub mod advantage;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod env;
pub mod hierarchy;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trainer;
