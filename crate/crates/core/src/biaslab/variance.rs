//! Per-sample gradient variance of the plain least-squares loss versus the
//! martingale-augmented loss, with exact continuation values and deltas.

use rayon::prelude::*;

use super::lattice::{lattice_price, ExerciseStyle, LatticeModel, LatticePayoff, LatticeSolution};
use super::BiasLabError;
use crate::market::{simulate_block, BlackScholes, ModelSpec, TimeGrid};
use crate::rng::RandomSpec;

const BLOCK: usize = 32768;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceConfig {
    pub s0: f64,
    pub strike: f64,
    pub rate: f64,
    pub sigma: f64,
    pub horizon: f64,
    /// Exercise dates `N`; `dt = T / N`.
    pub steps: usize,
    /// Fine substeps for the martingale increments (the network delta is held
    /// at its value for the start time of each step).
    pub substeps: usize,
    pub samples: usize,
    /// Tree steps between exercise dates for the oracle.
    pub lattice_refinement: usize,
    pub random: RandomSpec,
}

impl VarianceConfig {
    /// Put with `S_0 = K = 100`, `sigma = 0.2`, `r = 0.05`, `T = 1`, `N = 50`.
    pub fn standard_put(samples: usize, random: RandomSpec) -> Self {
        Self {
            s0: 100.0,
            strike: 100.0,
            rate: 0.05,
            sigma: 0.2,
            horizon: 1.0,
            steps: 50,
            substeps: 1,
            samples,
            lattice_refinement: 40,
            random,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult {
    pub samples: usize,
    /// Per-sample gradient variance summed over steps `k = 1..N-1`.
    pub var_ls: f64,
    pub var_bsde: f64,
    pub second_moment_ls: f64,
    pub second_moment_bsde: f64,
    /// `var_ls / var_bsde`.
    pub ratio: f64,
    /// Same ratio for each `k`, index `k - 1`.
    pub ratio_by_step: Vec<f64>,
}

pub fn oracle_solution(cfg: &VarianceConfig) -> Result<LatticeSolution, BiasLabError> {
    let model = LatticeModel::new(cfg.s0, cfg.rate, 0.0, cfg.sigma, cfg.horizon, cfg.steps * cfg.lattice_refinement)?;
    lattice_price(&model, LatticePayoff::Put { strike: cfg.strike }, ExerciseStyle::Bermudan(cfg.steps))
}

/// Sums of residuals and squared residuals per step.
#[derive(Clone)]
struct Moments {
    ls: Vec<[f64; 2]>,
    bsde: Vec<[f64; 2]>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { ls: vec![[0.0; 2]; n], bsde: vec![[0.0; 2]; n] }
    }

    fn add(&mut self, other: &Moments) {
        for (a, b) in self.ls.iter_mut().zip(&other.ls).chain(self.bsde.iter_mut().zip(&other.bsde)) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }
}

/// With the parameter direction `dC/dtheta = 1`, the per-sample gradients are
/// `2 (C_k - g(tau)) ` and `2 (C_k - g(tau) + sum_{j=k}^{tau-1} dM_j)`.
pub fn gradient_variance_experiment(cfg: &VarianceConfig) -> Result<VarianceResult, BiasLabError> {
    if cfg.samples < 2 || cfg.steps < 2 || cfg.substeps == 0 {
        return Err(BiasLabError::InvalidLattice("need >= 2 samples, >= 2 steps and >= 1 substep".into()));
    }
    let oracle = oracle_solution(cfg)?;
    let model = ModelSpec::BlackScholes(
        BlackScholes::uniform(cfg.rate, 0.0, cfg.sigma, 0.0, vec![cfg.s0])?,
    );
    let grid = TimeGrid::new(cfg.horizon, cfg.steps, cfg.substeps)?;
    let n = cfg.steps;
    let payoff = LatticePayoff::Put { strike: cfg.strike };
    let reward = |k: usize, s: f64| (-cfg.rate * grid.time(k)).exp() * payoff.intrinsic(s);

    let starts: Vec<usize> = (0..cfg.samples).step_by(BLOCK).collect();
    let partials: Vec<Moments> = starts
        .par_iter()
        .map(|&first| {
            let len = BLOCK.min(cfg.samples - first);
            let paths = simulate_block(&model, &grid, first, len, cfg.random, cfg.substeps, true);
            let mut acc = Moments::new(n);
            let mut sdw = [0.0];
            for i in 0..len {
                let mut realized = reward(n, paths.state(i, n)[0]);
                let mut tail = 0.0;
                for k in (1..n).rev() {
                    let s = paths.state(i, k)[0];
                    let c = oracle.continuation_at(k, s);
                    let mut dm = 0.0;
                    for j in 0..cfg.substeps {
                        let x = paths.fine_state(i, k, j).expect("fine data kept");
                        let dw = paths.fine_increment(i, k, j).expect("fine data kept");
                        model.apply_diffusion(x, dw, &mut sdw);
                        dm += oracle.continuation_delta(k, s) * sdw[0];
                    }
                    let r_ls = c - realized;
                    let r_bsde = r_ls + dm + tail;
                    let slot = k - 1;
                    acc.ls[slot][0] += r_ls;
                    acc.ls[slot][1] += r_ls * r_ls;
                    acc.bsde[slot][0] += r_bsde;
                    acc.bsde[slot][1] += r_bsde * r_bsde;
                    let g = reward(k, s);
                    if g >= c {
                        realized = g;
                        tail = 0.0;
                    } else {
                        tail += dm;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = Moments::new(n);
    for p in &partials {
        total.add(p);
    }

    let m = cfg.samples as f64;
    // variance and second moment of 2 r
    let var = |s: &[f64; 2]| 4.0 * (s[1] - s[0] * s[0] / m).max(0.0) / (m - 1.0);
    let second = |s: &[f64; 2]| 4.0 * s[1] / m;
    let steps = 0..n - 1;
    let var_ls: f64 = steps.clone().map(|k| var(&total.ls[k])).sum();
    let var_bsde: f64 = steps.clone().map(|k| var(&total.bsde[k])).sum();
    Ok(VarianceResult {
        samples: cfg.samples,
        var_ls,
        var_bsde,
        second_moment_ls: steps.clone().map(|k| second(&total.ls[k])).sum(),
        second_moment_bsde: steps.clone().map(|k| second(&total.bsde[k])).sum(),
        ratio: var_ls / var_bsde,
        ratio_by_step: steps.map(|k| var(&total.ls[k]) / var(&total.bsde[k])).collect(),
    })
}
