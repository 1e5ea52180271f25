//! Deep primal-dual BSDE solver for Bermudan optimal stopping.

pub mod biaslab;
pub mod bounds;
pub mod cli;
pub mod config;
pub mod market;
pub mod neural;
pub mod payoff;
pub mod problem;
pub mod rng;
pub mod stats;
pub mod trainer;
