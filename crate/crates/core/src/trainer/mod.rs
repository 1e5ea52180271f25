//! Backward induction over exercise dates with the martingale-augmented
//! least-squares loss.

mod report;

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::market::{simulate, PathEnsemble};
use crate::neural::{
    Adam, Checkpoint, CheckpointMeta, LearningRateSchedule, Mode, NeuralError, StepNetwork,
};
use crate::problem::Problem;
use crate::rng::{RandomSpec, Stream};

pub use report::{ReportRow, StepSummary, TrainReport};

/// Rows evaluated at once when sweeping all paths with a frozen network.
pub(crate) const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("invalid training plan: {0}")]
    Plan(String),
    #[error("step {0} has no trained successor to warm start from")]
    MissingWarmStart(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Which regression target each step fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Realized reward along the current stopping rule, with cached
    /// martingale increments of later steps in the residual.
    Bsde,
    /// One-step value `max(g, U_{k+1})` at the next date.
    ValueIteration,
}

impl Objective {
    pub fn label(self) -> &'static str {
        match self {
            Objective::Bsde => "bsde",
            Objective::ValueIteration => "value-iteration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub batch: usize,
    pub steps_per_epoch: usize,
    /// Epochs for `k <= N-2`; the last step gets twice as many.
    pub epochs: usize,
    pub widths: Vec<usize>,
    pub input_norm: bool,
    pub rate: f64,
    pub last_rate: f64,
    pub horizon: f64,
    pub last_horizon: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainPlan {
    pub fn training_paths(&self) -> usize {
        self.batch * self.steps_per_epoch
    }

    pub fn epochs_at(&self, k: usize, steps: usize) -> usize {
        if k + 1 == steps {
            2 * self.epochs
        } else {
            self.epochs
        }
    }

    pub fn schedule_at(&self, k: usize, steps: usize) -> LearningRateSchedule {
        if k + 1 == steps {
            LearningRateSchedule::new(self.last_rate, self.last_horizon)
        } else {
            LearningRateSchedule::new(self.rate, self.horizon)
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch < 2 || self.steps_per_epoch == 0 || self.epochs == 0 {
            return Err(TrainError::Plan("batch >= 2, steps per epoch >= 1 and epochs >= 1 required".into()));
        }
        if self.widths.len() != 2 || self.widths.contains(&0) {
            return Err(TrainError::Plan("two nonzero hidden widths required".into()));
        }
        Ok(())
    }
}

/// Per-path stopping index, realized reward and cached martingale increments.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingState {
    steps: usize,
    tau: Vec<usize>,
    reward: Vec<f64>,
    /// `[j][i]`; entry `j` is `G_j(X_j)^T sigma(X_j) dW_j`, zero once stopped.
    increments: Vec<Vec<f64>>,
    /// Sum of the cached increments from the current step up to `tau - 1`.
    tail: Vec<f64>,
}

impl StoppingState {
    /// Every path stops at maturity.
    pub fn terminal(problem: &Problem, paths: &PathEnsemble) -> Self {
        let n = paths.steps();
        let t = problem.grid.time(n);
        let reward = (0..paths.count()).map(|i| problem.payoff.reward_of(t, paths.state(i, n))).collect();
        Self {
            steps: n,
            tau: vec![n; paths.count()],
            reward,
            increments: vec![Vec::new(); n + 1],
            tail: vec![0.0; paths.count()],
        }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    /// Cached increment for path `i` at step `j` (zero if never cached).
    pub fn increment(&self, i: usize, j: usize) -> f64 {
        self.increments.get(j).and_then(|v| v.get(i)).copied().unwrap_or(0.0)
    }

    pub fn increments_at(&self, j: usize) -> &[f64] {
        &self.increments[j]
    }

    pub fn tail(&self) -> &[f64] {
        &self.tail
    }

    /// Regression targets `R_i - sum_j dM_j` for the loss at the current step.
    pub fn targets(&self) -> Vec<f64> {
        self.reward.iter().zip(&self.tail).map(|(r, t)| r - t).collect()
    }

    /// Checks the stored rewards and zero pattern against the paths.
    pub fn is_consistent(&self, problem: &Problem, paths: &PathEnsemble) -> bool {
        (0..self.len()).all(|i| {
            let k = self.tau[i];
            let r = problem.payoff.reward_of(problem.grid.time(k), paths.state(i, k));
            let zeros = (k..=self.steps).all(|j| self.increment(i, j) == 0.0);
            let tail: f64 = (0..k).map(|j| self.increment(i, j)).sum();
            r == self.reward[i] && zeros && (tail - self.tail[i]).abs() <= 1e-9 * (1.0 + tail.abs())
        })
    }

    /// Applies the frozen step-`k` network: stop where `g >= C`, otherwise cache
    /// `G^T sigma dW_k` and keep the later stopping index.
    pub fn update(&mut self, k: usize, net: &StepNetwork, problem: &Problem, paths: &PathEnsemble) {
        let m = paths.count();
        let t = problem.grid.time(k);
        let mut cached = vec![0.0; m];
        let all: Vec<usize> = (0..m).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let x = paths.gather_states(k, chunk);
            let dw = paths.gather_increments(k, chunk);
            let (g, phi) = problem.rewards_and_features(t, x.view());
            let (c, grad) = net.predict(x.view(), phi.view());
            let sdw = problem.diffused(x.view(), dw.view());
            let dm = (&grad * &sdw).sum_axis(Axis(1));
            for (row, &i) in chunk.iter().enumerate() {
                if g[row] >= c[row] {
                    for j in k + 1..self.steps {
                        if let Some(v) = self.increments[j].get_mut(i) {
                            *v = 0.0;
                        }
                    }
                    self.tau[i] = k;
                    self.reward[i] = g[row];
                    self.tail[i] = 0.0;
                } else {
                    cached[i] = dm[row];
                    self.tail[i] += dm[row];
                }
            }
        }
        self.increments[k] = cached;
    }
}

/// How a step network starts before training.
pub enum Init<'a> {
    Xavier(RandomSpec),
    WarmStart(&'a StepNetwork),
}

/// Mean squared residual `C(X_k) + G(X_k)^T sigma dW_k - y` over `batch` and
/// its parameter gradient. `net` must be in training mode.
pub fn regression_loss(
    net: &mut StepNetwork,
    problem: &Problem,
    paths: &PathEnsemble,
    k: usize,
    batch: &[usize],
    targets: &[f64],
) -> Result<(f64, Vec<f64>), NeuralError> {
    let x = paths.gather_states(k, batch);
    let dw = paths.gather_increments(k, batch);
    let (_, phi) = problem.rewards_and_features(problem.grid.time(k), x.view());
    let sdw = problem.diffused(x.view(), dw.view());
    let (c, grad) = net.forward(x.view(), phi.view())?;
    let b = batch.len() as f64;
    let residual: Array1<f64> = Array1::from_shape_fn(batch.len(), |row| {
        c[row] + grad.row(row).dot(&sdw.row(row)) - targets[batch[row]]
    });
    let loss = residual.mapv(|r| r * r).sum() / b;
    let d_values = residual.mapv(|r| 2.0 * r / b);
    let d_grads: Array2<f64> = &sdw * &d_values.view().insert_axis(Axis(1));
    let grads = net.backward(d_values.view(), d_grads.view())?;
    Ok((loss, grads))
}

/// The BSDE loss at step `k` given the stopping state from step `k + 1`.
pub fn bsde_loss(
    net: &mut StepNetwork,
    problem: &Problem,
    paths: &PathEnsemble,
    state: &StoppingState,
    k: usize,
    batch: &[usize],
) -> Result<(f64, Vec<f64>), NeuralError> {
    regression_loss(net, problem, paths, k, batch, &state.targets())
}

/// Trains the step-`k` network against fixed per-path `targets`; the result
/// is in evaluation mode.
#[allow(clippy::too_many_arguments)]
pub fn train_step_k(
    k: usize,
    problem: &Problem,
    paths: &PathEnsemble,
    targets: &[f64],
    plan: &TrainPlan,
    init: Init,
    clock: &Instant,
    report: &mut TrainReport,
) -> Result<StepNetwork, TrainError> {
    let n_steps = problem.steps();
    let mut net = match init {
        Init::Xavier(random) => {
            let mut net = StepNetwork::new(problem.dim(), &plan.widths, plan.input_norm);
            net.xavier_init(random);
            net
        }
        Init::WarmStart(prev) => prev.clone_parameters(),
    };
    net.set_mode(Mode::Training);
    let mut adam = Adam::for_network(&net);
    let schedule = plan.schedule_at(k, n_steps);
    let epochs = plan.epochs_at(k, n_steps);
    let shuffle = RandomSpec::new(plan.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..paths.count()).collect();
    let mut n = 0u64;
    let mut epoch_means = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle.item_rng(((k as u64) << 20) | epoch as u64));
        let mut total = 0.0;
        for (step, batch) in order.chunks_exact(plan.batch).enumerate() {
            let (loss, grads) = regression_loss(&mut net, problem, paths, k, batch, targets)?;
            let rate = schedule.rate(n);
            adam.step_network(&mut net, &grads, rate)?;
            report.rows.push(ReportRow {
                k,
                epoch,
                step,
                loss,
                learning_rate: rate,
                wall_ms: clock.elapsed().as_millis() as u64,
            });
            total += loss;
            n += 1;
        }
        epoch_means.push(total / plan.steps_per_epoch as f64);
    }
    report.steps.push(StepSummary {
        k,
        epochs,
        final_loss: report.rows.last().map_or(f64::NAN, |r| r.loss),
        epoch_losses: epoch_means,
    });
    net.set_mode(Mode::Evaluation);
    Ok(net)
}

/// Runs the full backward sweep `k = N-1, ..., 1` on a freshly simulated
/// training set of `batch * steps_per_epoch` paths.
pub fn train_all(problem: &Problem, plan: &TrainPlan, objective: Objective) -> Result<(Checkpoint, TrainReport), TrainError> {
    plan.validate()?;
    let clock = Instant::now();
    let grid = problem.grid.with_substeps(1).map_err(|e| TrainError::Plan(e.to_string()))?;
    let paths = simulate(&problem.model, &grid, plan.training_paths(), RandomSpec::new(plan.seed, Stream::Train), false);
    train_on_paths(problem, &paths, plan, objective, &clock)
}

/// Backward sweep on a given training set.
pub fn train_on_paths(
    problem: &Problem,
    paths: &PathEnsemble,
    plan: &TrainPlan,
    objective: Objective,
    clock: &Instant,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    plan.validate()?;
    let n = problem.steps();
    let mut checkpoint = Checkpoint::new(CheckpointMeta {
        dim: problem.dim(),
        widths: plan.widths.clone(),
        input_norm: plan.input_norm,
        steps: n,
        horizon: problem.grid.horizon(),
        seed: plan.seed,
        config_hash: plan.config_hash.clone(),
        objective: objective.label().into(),
    });
    let mut report = TrainReport::default();
    if n < 2 {
        report.note = Some("no trainable steps: the grid has no interior exercise dates".into());
        return Ok((checkpoint, report));
    }
    let mut state = StoppingState::terminal(problem, paths);
    for k in (1..n).rev() {
        let targets = match objective {
            Objective::Bsde => state.targets(),
            Objective::ValueIteration => one_step_values(problem, paths, checkpoint.get(k + 1), k + 1),
        };
        let init = if k + 1 == n {
            Init::Xavier(RandomSpec::new(plan.seed, Stream::Init).derive(k as u64))
        } else {
            Init::WarmStart(checkpoint.get(k + 1).ok_or(TrainError::MissingWarmStart(k))?)
        };
        let net = train_step_k(k, problem, paths, &targets, plan, init, clock, &mut report)?;
        if objective == Objective::Bsde {
            state.update(k, &net, problem, paths);
        }
        checkpoint.set(k, net);
    }
    report.wall_ms = clock.elapsed().as_millis() as u64;
    Ok((checkpoint, report))
}

/// `max(g(t_k, X_k), U_k(X_k))` on every path, or `g` alone without a network.
fn one_step_values(problem: &Problem, paths: &PathEnsemble, net: Option<&StepNetwork>, k: usize) -> Vec<f64> {
    let t = problem.grid.time(k);
    let all: Vec<usize> = (0..paths.count()).collect();
    let mut out = Vec::with_capacity(all.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = paths.gather_states(k, chunk);
        let (g, phi) = problem.rewards_and_features(t, x.view());
        match net {
            Some(net) => {
                let u = net.predict_values(x.view(), phi.view());
                out.extend(g.iter().zip(u.iter()).map(|(g, u)| g.max(*u)));
            }
            None => out.extend(g.iter()),
        }
    }
    out
}
