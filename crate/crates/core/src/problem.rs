//! A stopping problem: dynamics, reward and exercise grid together.

use ndarray::{Array1, Array2, ArrayView2};

use crate::market::{ModelSpec, TimeGrid};
use crate::payoff::{PayoffError, PayoffSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: ModelSpec,
    pub payoff: PayoffSpec,
    pub grid: TimeGrid,
}

impl Problem {
    pub fn new(model: ModelSpec, payoff: PayoffSpec, grid: TimeGrid) -> Result<Self, PayoffError> {
        if model.dim() != payoff.dim {
            return Err(PayoffError::DimensionMismatch { expected: model.dim(), got: payoff.dim });
        }
        Ok(Self { model, payoff, grid })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Rewards and features for each row of `states` at time `t`.
    pub fn rewards_and_features(&self, t: f64, states: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
        let features: Array1<f64> = states
            .rows()
            .into_iter()
            .map(|row| self.payoff.feature_of(t, row.as_slice().expect("row-major states")))
            .collect();
        (features.mapv(|f| f.max(0.0)), features)
    }

    /// `sigma(x_i) dW_i` for each row.
    pub fn diffused(&self, states: ArrayView2<f64>, increments: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(states.dim());
        for ((x, dw), mut o) in states.rows().into_iter().zip(increments.rows()).zip(out.rows_mut()) {
            self.model.apply_diffusion(
                x.as_slice().expect("row-major states"),
                dw.as_slice().expect("row-major increments"),
                o.as_slice_mut().expect("fresh array"),
            );
        }
        out
    }

    /// `g(0, x_0)`.
    pub fn initial_reward(&self) -> f64 {
        self.payoff.reward_of(0.0, &self.model.initial_state())
    }
}
