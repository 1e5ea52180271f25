//! Exact small-scale oracles for the bias and variance properties of the
//! regression recursions.

mod bias;
mod lattice;
mod variance;

use thiserror::Error;

use crate::market::MarketError;

pub use bias::{
    bias_experiment_stopping_time, bias_experiment_value_iteration, write_bias_csv, BiasResult,
    NoisyExpectationOracle, ThreeDateProblem,
};
pub use lattice::{
    black_scholes, lattice_price, ExerciseStyle, LatticeModel, LatticePayoff, LatticeSolution,
};
pub use variance::{gradient_variance_experiment, oracle_solution, VarianceConfig, VarianceResult};

#[derive(Debug, Error)]
pub enum BiasLabError {
    #[error("{steps} tree steps cannot be split into {dates} exercise intervals")]
    IncompatibleGrid { steps: usize, dates: usize },
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
