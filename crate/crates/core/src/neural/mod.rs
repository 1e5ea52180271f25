//! Small feedforward-network engine with exact reverse-mode gradients.

mod checkpoint;
pub mod layers;
mod mlp;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::rng::RandomSpec;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use layers::{BatchNorm, Dense, BN_EPS, BN_MOMENTUM};
pub use mlp::Mlp;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("training mode needs at least 2 samples per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("backward called without a recorded training forward pass")]
    NoForwardRecorded,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Evaluation,
}

/// Network for one time step: a value head fed `(x, phi)` and a gradient head
/// fed `x` alone.
#[derive(Debug, Clone)]
pub struct StepNetwork {
    pub value: Mlp,
    pub gradient: Mlp,
    mode: Mode,
    tape: Option<(mlp::MlpTape, mlp::MlpTape)>,
}

impl PartialEq for StepNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value && self.gradient == other.gradient
    }
}

impl StepNetwork {
    pub fn new(dim: usize, widths: &[usize], input_norm: bool) -> Self {
        Self {
            value: Mlp::new(dim + 1, widths, 1, input_norm),
            gradient: Mlp::new(dim, widths, dim, input_norm),
            mode: Mode::Evaluation,
            tape: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.d_in()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.value.widths()
    }

    pub fn has_input_norm(&self) -> bool {
        self.value.input_norm.is_some()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.tape = None;
    }

    pub fn xavier_init(&mut self, random: RandomSpec) {
        let mut rng = random.item_rng(0);
        self.value.xavier(&mut rng);
        self.gradient.xavier(&mut rng);
        self.tape = None;
    }

    /// Copy of weights and running statistics with no recorded pass.
    pub fn clone_parameters(&self) -> Self {
        Self { value: self.value.clone(), gradient: self.gradient.clone(), mode: self.mode, tape: None }
    }

    /// Runs both heads in the current mode. Training mode records a tape for
    /// [`StepNetwork::backward`] and updates the running statistics.
    pub fn forward(
        &mut self,
        states: ArrayView2<f64>,
        features: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>), NeuralError> {
        self.check_inputs(states, features)?;
        match self.mode {
            Mode::Evaluation => Ok(self.predict(states, features)),
            Mode::Training => {
                if states.nrows() < 2 {
                    return Err(NeuralError::BatchTooSmall(states.nrows()));
                }
                let input = value_input(states, features);
                let (values, vt) = self.value.forward_train(input.view());
                let (grads, gt) = self.gradient.forward_train(states);
                self.tape = Some((vt, gt));
                Ok((values.column(0).to_owned(), grads))
            }
        }
    }

    /// Evaluation-mode forward using running statistics.
    pub fn predict(&self, states: ArrayView2<f64>, features: ArrayView1<f64>) -> (Array1<f64>, Array2<f64>) {
        let input = value_input(states, features);
        let values = self.value.forward_eval(input.view());
        let grads = self.gradient.forward_eval(states);
        (values.column(0).to_owned(), grads)
    }

    /// Evaluation-mode value head only.
    pub fn predict_values(&self, states: ArrayView2<f64>, features: ArrayView1<f64>) -> Array1<f64> {
        let input = value_input(states, features);
        self.value.forward_eval(input.view()).column(0).to_owned()
    }

    /// Evaluation-mode gradient head only.
    pub fn predict_gradients(&self, states: ArrayView2<f64>) -> Array2<f64> {
        self.gradient.forward_eval(states)
    }

    /// Parameter gradients of `sum_i dv_i C_i + sum_ij dg_ij G_ij` for the
    /// last recorded pass, flattened in `visit_params` order.
    pub fn backward(&mut self, d_values: ArrayView1<f64>, d_grads: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
        let (vt, gt) = self.tape.as_ref().ok_or(NeuralError::NoForwardRecorded)?;
        let nv = self.value.parameter_count();
        let mut out = vec![0.0; nv + self.gradient.parameter_count()];
        let dv = d_values.to_owned().insert_axis(Axis(1));
        self.value.backward(vt, dv.view(), &mut out[..nv]);
        self.gradient.backward(gt, d_grads, &mut out[nv..]);
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.value.parameter_count() + self.gradient.parameter_count()
    }

    pub fn affine_parameter_count(&self) -> usize {
        self.value.affine_parameter_count() + self.gradient.affine_parameter_count()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        self.value.visit_params(f);
        self.gradient.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.value.visit_params_mut(f);
        self.gradient.visit_params_mut(f);
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit_params(&mut |p| out.extend_from_slice(p));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.parameter_count() {
            return Err(NeuralError::Shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        self.visit_params_mut(&mut |p| {
            p.copy_from_slice(&flat[at..at + p.len()]);
            at += p.len();
        });
        Ok(())
    }

    pub fn norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.value.norms().chain(self.gradient.norms())
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.value.norms_mut().chain(self.gradient.norms_mut())
    }

    fn check_inputs(&self, states: ArrayView2<f64>, features: ArrayView1<f64>) -> Result<(), NeuralError> {
        if states.ncols() != self.dim() || features.len() != states.nrows() {
            return Err(NeuralError::Shape(format!(
                "states {:?} and {} features for a {}-dimensional network",
                states.dim(),
                features.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

fn value_input(states: ArrayView2<f64>, features: ArrayView1<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, features.insert_axis(Axis(1))]).expect("matching row counts")
}

/// `base * decay^{max((n - warmup) / horizon, 0)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRateSchedule {
    pub base: f64,
    pub decay: f64,
    pub warmup: f64,
    pub horizon: f64,
}

impl LearningRateSchedule {
    pub fn new(base: f64, horizon: f64) -> Self {
        Self { base, decay: 1e-4, warmup: 50.0, horizon }
    }

    pub fn rate(&self, n: u64) -> f64 {
        let e = ((n as f64 - self.warmup) / self.horizon).max(0.0);
        self.base * self.decay.powf(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(parameter_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; parameter_count],
            second: vec![0.0; parameter_count],
            step: 0,
        }
    }

    pub fn for_network(net: &StepNetwork) -> Self {
        Self::new(net.parameter_count())
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], rate: f64) -> Result<(), NeuralError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NeuralError::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.first[i] / c1;
            let vhat = self.second[i] / c2;
            params[i] -= rate * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut StepNetwork, grads: &[f64], rate: f64) -> Result<(), NeuralError> {
        let mut flat = net.flat_params();
        self.update(&mut flat, grads, rate)?;
        net.set_flat_params(&flat)
    }
}
