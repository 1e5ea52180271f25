//! Lower bounds from the learned stopping rule, dual upper bounds from the
//! learned martingale, and projected deltas.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::market::{simulate_block, MarketError, PathEnsemble};
use crate::neural::{Checkpoint, StepNetwork};
use crate::payoff::{geometric_mean, PayoffKind};
use crate::problem::Problem;
use crate::rng::{RandomSpec, Stream};
use crate::stats::{self, Z95};
use crate::trainer::EVAL_CHUNK;

/// Paths simulated at once by the streaming estimators.
const PATH_BLOCK: usize = 16384;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("paths carry no fine grid")]
    MissingFineGrid,
    #[error("checkpoint does not match the problem: {0}")]
    CheckpointGridMismatch(String),
    #[error("projected deltas need a geometric basket call, got {0:?}")]
    WrongPayoffKind(PayoffKind),
    #[error("at least {needed} samples needed, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Lower,
    Upper,
}

impl BoundKind {
    pub fn label(self) -> &'static str {
        match self {
            BoundKind::Lower => "lower",
            BoundKind::Upper => "upper",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundEstimate {
    pub kind: BoundKind,
    pub estimate: f64,
    /// Sample standard deviation of the per-path values.
    pub std: f64,
    pub halfwidth: f64,
    pub n: usize,
    /// Fine substeps used (1 for lower bounds).
    pub substeps: usize,
    pub samples: Vec<f64>,
}

impl BoundEstimate {
    fn from_samples(kind: BoundKind, samples: Vec<f64>, floor: f64, substeps: usize) -> Self {
        let n = samples.len();
        let std = stats::sample_std(&samples);
        let estimate = stats::mean(&samples).max(floor);
        Self { kind, estimate, std, halfwidth: Z95 * std / (n.max(1) as f64).sqrt(), n, substeps, samples }
    }

    pub fn stderr(&self) -> f64 {
        self.std / (self.n.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerBound {
    pub estimate: BoundEstimate,
    /// `stops[k]`: number of paths whose rule fired first at `k` (`k = N` means maturity).
    pub stops: Vec<usize>,
}

pub fn check_checkpoint(checkpoint: &Checkpoint, problem: &Problem) -> Result<(), BoundsError> {
    let meta = &checkpoint.meta;
    if meta.steps != problem.steps() || meta.dim != problem.dim() {
        return Err(BoundsError::CheckpointGridMismatch(format!(
            "checkpoint has N = {}, d = {}; problem has N = {}, d = {}",
            meta.steps,
            meta.dim,
            problem.steps(),
            problem.dim()
        )));
    }
    if (meta.horizon - problem.grid.horizon()).abs() > 1e-12 * problem.grid.horizon().max(1.0) {
        return Err(BoundsError::CheckpointGridMismatch(format!(
            "checkpoint horizon {} differs from {}",
            meta.horizon,
            problem.grid.horizon()
        )));
    }
    if let Some(k) = (1..problem.steps()).find(|&k| checkpoint.get(k).is_none()) {
        return Err(BoundsError::CheckpointGridMismatch(format!("no network for step {k}")));
    }
    Ok(())
}

fn net(checkpoint: &Checkpoint, k: usize) -> &StepNetwork {
    checkpoint.get(k).expect("checkpoint validated")
}

/// First `k >= 1` where `g(t_k, X_k) >= C_k(X_k)`, else `N`.
pub fn stopping_indices(checkpoint: &Checkpoint, problem: &Problem, paths: &PathEnsemble) -> Result<Vec<usize>, BoundsError> {
    check_checkpoint(checkpoint, problem)?;
    let n = problem.steps();
    let mut tau = vec![n; paths.count()];
    let mut active: Vec<usize> = (0..paths.count()).collect();
    for k in 1..n {
        let t = problem.grid.time(k);
        let net = net(checkpoint, k);
        let stopped: Vec<Vec<usize>> = active
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let x = paths.gather_states(k, chunk);
                let (g, phi) = problem.rewards_and_features(t, x.view());
                let c = net.predict_values(x.view(), phi.view());
                chunk.iter().enumerate().filter(|&(row, _)| g[row] >= c[row]).map(|(_, &i)| i).collect()
            })
            .collect();
        for i in stopped.into_iter().flatten() {
            tau[i] = k;
        }
        active.retain(|&i| tau[i] == n);
    }
    Ok(tau)
}

/// Lower bound on a given set of paths.
pub fn lower_bound_on_paths(checkpoint: &Checkpoint, problem: &Problem, paths: &PathEnsemble) -> Result<LowerBound, BoundsError> {
    let (samples, stops) = realized_rewards(checkpoint, problem, paths)?;
    Ok(LowerBound {
        estimate: BoundEstimate::from_samples(BoundKind::Lower, samples, problem.initial_reward(), 1),
        stops,
    })
}

fn realized_rewards(
    checkpoint: &Checkpoint,
    problem: &Problem,
    paths: &PathEnsemble,
) -> Result<(Vec<f64>, Vec<usize>), BoundsError> {
    let tau = stopping_indices(checkpoint, problem, paths)?;
    let mut stops = vec![0; problem.steps() + 1];
    let samples = tau
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            stops[k] += 1;
            problem.payoff.reward_of(problem.grid.time(k), paths.state(i, k))
        })
        .collect();
    Ok((samples, stops))
}

/// Lower bound on `count` fresh paths from the lower-bound stream.
pub fn lower_bound(checkpoint: &Checkpoint, problem: &Problem, count: usize, seed: u64) -> Result<LowerBound, BoundsError> {
    check_checkpoint(checkpoint, problem)?;
    let random = RandomSpec::new(seed, Stream::Lower);
    let mut samples = Vec::with_capacity(count);
    let mut stops = vec![0; problem.steps() + 1];
    let mut first = 0;
    while first < count {
        let len = PATH_BLOCK.min(count - first);
        let block = simulate_block(&problem.model, &problem.grid, first, len, random, 1, false);
        let (s, st) = realized_rewards(checkpoint, problem, &block)?;
        samples.extend(s);
        stops.iter_mut().zip(st).for_each(|(a, b)| *a += b);
        first += len;
    }
    Ok(LowerBound {
        estimate: BoundEstimate::from_samples(BoundKind::Lower, samples, problem.initial_reward(), 1),
        stops,
    })
}

/// `max(g(t_1, X_1), C_1(X_1))`, or `g(t_1, X_1)` when `t_1` is maturity.
fn first_step_values(checkpoint: &Checkpoint, problem: &Problem, paths: &PathEnsemble) -> Vec<f64> {
    let all: Vec<usize> = (0..paths.count()).collect();
    let t = problem.grid.time(1);
    let net = checkpoint.get(1);
    all.par_chunks(EVAL_CHUNK)
        .flat_map_iter(|chunk| {
            let x = paths.gather_states(1, chunk);
            let (g, phi) = problem.rewards_and_features(t, x.view());
            match (net, problem.steps() > 1) {
                (Some(net), true) => {
                    let c = net.predict_values(x.view(), phi.view());
                    g.iter().zip(c.iter()).map(|(g, c)| g.max(*c)).collect::<Vec<_>>()
                }
                _ => g.to_vec(),
            }
        })
        .collect()
}

/// `M_1 - M_0`: the first-step value minus its sample mean.
pub fn first_increment(checkpoint: &Checkpoint, problem: &Problem, paths: &PathEnsemble) -> Result<Vec<f64>, BoundsError> {
    if paths.count() < 2 {
        return Err(BoundsError::TooFewSamples { needed: 2, got: paths.count() });
    }
    Ok(center(first_step_values(checkpoint, problem, paths)))
}

fn center(mut values: Vec<f64>) -> Vec<f64> {
    let m = stats::mean(&values);
    values.iter_mut().for_each(|v| *v -= m);
    values
}

/// `M_{k+1} - M_k = sum_j G_k(X_{k,j})^T sigma(X_{k,j}) dW_{k,j}` over the fine substeps.
pub fn doob_increments_fine(
    checkpoint: &Checkpoint,
    problem: &Problem,
    paths: &PathEnsemble,
    k: usize,
) -> Result<Vec<f64>, BoundsError> {
    let substeps = paths.substeps().ok_or(BoundsError::MissingFineGrid)?;
    let net = checkpoint
        .get(k)
        .ok_or_else(|| BoundsError::CheckpointGridMismatch(format!("no network for step {k}")))?;
    let all: Vec<usize> = (0..paths.count()).collect();
    Ok(all
        .par_chunks(EVAL_CHUNK)
        .flat_map_iter(|chunk| {
            let mut acc = vec![0.0; chunk.len()];
            for j in 0..substeps {
                let (x, dw) = paths.gather_fine(k, j, chunk).expect("fine data present");
                let g = net.predict_gradients(x.view());
                let sdw = problem.diffused(x.view(), dw.view());
                let inc = (&g * &sdw).sum_axis(Axis(1));
                acc.iter_mut().zip(inc.iter()).for_each(|(a, b)| *a += b);
            }
            acc
        })
        .collect())
}

/// Cumulative martingale values `M[i][k]`, `k = 0..=N`, with `M[i][0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingalePaths {
    pub values: Array2<f64>,
}

impl MartingalePaths {
    pub fn increment(&self, i: usize, k: usize) -> f64 {
        self.values[[i, k + 1]] - self.values[[i, k]]
    }
}

pub fn martingale_paths(checkpoint: &Checkpoint, problem: &Problem, paths: &PathEnsemble) -> Result<MartingalePaths, BoundsError> {
    check_checkpoint(checkpoint, problem)?;
    if !paths.has_fine() {
        return Err(BoundsError::MissingFineGrid);
    }
    let n = problem.steps();
    let mut values = Array2::zeros((paths.count(), n + 1));
    let first = first_increment(checkpoint, problem, paths)?;
    values.column_mut(1).assign(&ndarray::Array1::from(first));
    for k in 1..n {
        let inc = doob_increments_fine(checkpoint, problem, paths, k)?;
        for i in 0..paths.count() {
            values[[i, k + 1]] = values[[i, k]] + inc[i];
        }
    }
    Ok(MartingalePaths { values })
}

/// `max_k (g(t_k, X_k) - M_k)` per path.
pub fn dual_samples(problem: &Problem, paths: &PathEnsemble, martingale: &MartingalePaths) -> Vec<f64> {
    (0..paths.count())
        .map(|i| {
            (0..=problem.steps())
                .map(|k| problem.payoff.reward_of(problem.grid.time(k), paths.state(i, k)) - martingale.values[[i, k]])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Upper bound on a given fine-grid ensemble.
pub fn upper_bound_on_paths(checkpoint: &Checkpoint, problem: &Problem, paths: &PathEnsemble) -> Result<BoundEstimate, BoundsError> {
    let m = martingale_paths(checkpoint, problem, paths)?;
    let samples = dual_samples(problem, paths, &m);
    Ok(BoundEstimate::from_samples(
        BoundKind::Upper,
        samples,
        f64::NEG_INFINITY,
        paths.substeps().unwrap_or(1),
    ))
}

/// Upper bounds on `count` fresh fine-grid paths from the upper-bound stream,
/// one per entry of `levels`. All levels share Brownian increments: paths are
/// drawn at the finest level and summed down.
pub fn upper_bound(
    checkpoint: &Checkpoint,
    problem: &Problem,
    count: usize,
    seed: u64,
    levels: &[usize],
) -> Result<Vec<BoundEstimate>, BoundsError> {
    check_checkpoint(checkpoint, problem)?;
    if count < 2 {
        return Err(BoundsError::TooFewSamples { needed: 2, got: count });
    }
    let finest = levels.iter().copied().max().unwrap_or(1).max(1);
    if let Some(&bad) = levels.iter().find(|&&l| l == 0 || finest % l != 0) {
        return Err(MarketError::IncompatibleRefinement { requested: bad, available: finest }.into());
    }
    let random = RandomSpec::new(seed, Stream::Upper);
    let n = problem.steps();
    let g0 = problem.initial_reward();
    // per level: first-step values a_i and max_{k>=1}(g_k - (M_k - M_1))
    let mut firsts = vec![Vec::with_capacity(count); levels.len()];
    let mut rests = vec![Vec::with_capacity(count); levels.len()];
    let mut first = 0;
    while first < count {
        let len = PATH_BLOCK.min(count - first);
        let block = simulate_block(&problem.model, &problem.grid, first, len, random, finest, true);
        for (li, &level) in levels.iter().enumerate() {
            let coarse;
            let paths = if level == finest {
                &block
            } else {
                coarse = block.coarsen(&problem.model, level)?;
                &coarse
            };
            firsts[li].extend(first_step_values(checkpoint, problem, paths));
            let mut partial = vec![0.0; len];
            let mut best: Vec<f64> = (0..len)
                .map(|i| problem.payoff.reward_of(problem.grid.time(1), paths.state(i, 1)))
                .collect();
            for k in 1..n {
                let inc = doob_increments_fine(checkpoint, problem, paths, k)?;
                let t = problem.grid.time(k + 1);
                for i in 0..len {
                    partial[i] += inc[i];
                    best[i] = best[i].max(problem.payoff.reward_of(t, paths.state(i, k + 1)) - partial[i]);
                }
            }
            rests[li].extend(best);
        }
        first += len;
    }
    Ok(levels
        .iter()
        .enumerate()
        .map(|(li, &level)| {
            let mean_a = stats::mean(&firsts[li]);
            let samples = firsts[li]
                .iter()
                .zip(&rests[li])
                .map(|(a, rest)| g0.max(rest - (a - mean_a)))
                .collect();
            BoundEstimate::from_samples(BoundKind::Upper, samples, f64::NEG_INFINITY, level)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Continuation,
    Stopping,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedDelta {
    pub basket: f64,
    pub delta: f64,
    pub region: Region,
}

/// Delta with respect to the geometric mean `Xbar`: `(1/Xbar) sum_j G_j x_j`
/// where continuing, the discounted payoff slope where stopping.
pub fn project_delta(
    checkpoint: &Checkpoint,
    problem: &Problem,
    k: usize,
    states: ArrayView2<f64>,
) -> Result<Vec<ProjectedDelta>, BoundsError> {
    if problem.payoff.kind != PayoffKind::GeometricBasketCall {
        return Err(BoundsError::WrongPayoffKind(problem.payoff.kind));
    }
    let net = checkpoint
        .get(k)
        .ok_or_else(|| BoundsError::CheckpointGridMismatch(format!("no network for step {k}")))?;
    let t = problem.grid.time(k);
    let (g, phi) = problem.rewards_and_features(t, states);
    let (c, grad) = net.predict(states, phi.view());
    let slope = problem.payoff.discount(t);
    Ok(states
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let basket = geometric_mean(x.as_slice().expect("row-major states"));
            if g[i] >= c[i] {
                let delta = if g[i] > 0.0 { slope } else { 0.0 };
                ProjectedDelta { basket, delta, region: Region::Stopping }
            } else {
                let delta = grad.row(i).dot(&x) / basket;
                ProjectedDelta { basket, delta, region: Region::Continuation }
            }
        })
        .collect())
}
