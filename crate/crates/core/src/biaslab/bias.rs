//! High and low bias of the two regression-based recursions on a three-date
//! problem, with the regression replaced by exact DP plus unbiased noise.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::lattice::{lattice_price, ExerciseStyle, LatticeModel, LatticePayoff, LatticeSolution};
use super::BiasLabError;
use crate::rng::RandomSpec;
use crate::stats::{self, Z95};

/// Exact conditional expectation plus `eta * N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyExpectationOracle {
    pub eta: f64,
}

impl NoisyExpectationOracle {
    pub fn sample<R: Rng>(&self, exact: f64, rng: &mut R) -> f64 {
        if self.eta == 0.0 {
            return exact;
        }
        let z: f64 = rng.sample(StandardNormal);
        exact + self.eta * z
    }
}

/// Dates `t_k, t_{k+1}, t_{k+2}` on a tree: node probabilities, rewards and
/// exact continuation values at the middle date, and the exact root value.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeDateProblem {
    pub probabilities: Vec<f64>,
    pub rewards: Vec<f64>,
    pub continuation: Vec<f64>,
    /// `C_k = E[max(g_{k+1}, C_{k+1})]`.
    pub exact: f64,
}

impl ThreeDateProblem {
    pub fn from_lattice(solution: &LatticeSolution) -> Result<Self, BiasLabError> {
        if solution.dates.len() != 3 {
            return Err(BiasLabError::IncompatibleGrid { steps: solution.model.steps, dates: solution.dates.len() - 1 });
        }
        let m = &solution.model;
        let step = solution.dates[1];
        let disc = (-m.rate * m.time(step)).exp();
        let rewards: Vec<f64> = (0..=step).map(|j| disc * solution.payoff.intrinsic(m.price(step, j))).collect();
        Ok(Self {
            probabilities: m.node_probabilities(step),
            continuation: solution.continuation[1].clone(),
            rewards,
            exact: solution.price,
        })
    }

    /// Put with `S_0 = K = 100`, `sigma = 0.2`, `r = 0.05`, dates `0, 0.5, 1`
    /// and `steps_between` tree steps between consecutive dates.
    pub fn standard_put(steps_between: usize) -> Result<Self, BiasLabError> {
        let model = LatticeModel::new(100.0, 0.05, 0.0, 0.2, 1.0, 2 * steps_between)?;
        let sol = lattice_price(&model, LatticePayoff::Put { strike: 100.0 }, ExerciseStyle::Bermudan(2))?;
        Self::from_lattice(&sol)
    }

    /// `E[sum p_j max(g_j, C_j + eta eps_j)] + eta eps_0`, one replication.
    fn value_iteration_draw<R: Rng>(&self, oracle: NoisyExpectationOracle, rng: &mut R) -> f64 {
        let inner: f64 = self
            .probabilities
            .iter()
            .zip(&self.rewards)
            .zip(&self.continuation)
            .map(|((p, g), c)| p * g.max(oracle.sample(*c, rng)))
            .sum();
        oracle.sample(inner, rng)
    }

    /// Stop at the middle date where `g >= C + noise`; the root estimate is the
    /// exact expected reward of that rule plus noise.
    fn stopping_time_draw<R: Rng>(&self, oracle: NoisyExpectationOracle, rng: &mut R) -> f64 {
        let inner: f64 = self
            .probabilities
            .iter()
            .zip(&self.rewards)
            .zip(&self.continuation)
            .map(|((p, g), c)| if *g >= oracle.sample(*c, rng) { p * g } else { p * c })
            .sum();
        oracle.sample(inner, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasResult {
    pub experiment: String,
    pub eta: f64,
    pub replications: usize,
    pub mean_bias: f64,
    pub stderr: f64,
    pub halfwidth: f64,
    /// Two-sided p-value of the hypothesis `bias = 0`.
    pub sign_test_p: f64,
}

impl BiasResult {
    fn from_errors(experiment: &str, eta: f64, errors: &[f64]) -> Self {
        let (mean, se) = stats::mean_and_stderr(errors);
        let p = if se > 0.0 { stats::two_sided_p(mean / se) } else if mean == 0.0 { 1.0 } else { 0.0 };
        Self {
            experiment: experiment.into(),
            eta,
            replications: errors.len(),
            mean_bias: mean,
            stderr: se,
            halfwidth: Z95 * se,
            sign_test_p: p,
        }
    }

    /// Bias in units of its standard error.
    pub fn z(&self) -> f64 {
        if self.stderr > 0.0 {
            self.mean_bias / self.stderr
        } else {
            0.0
        }
    }
}

fn replicate<F>(replications: usize, random: RandomSpec, draw: F) -> Vec<f64>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
{
    (0..replications).into_par_iter().map(|r| draw(&mut random.item_rng(r as u64))).collect()
}

/// Mean of `C_hat_k - C_k` for the value-iteration estimator.
pub fn bias_experiment_value_iteration(
    problem: &ThreeDateProblem,
    oracle: NoisyExpectationOracle,
    replications: usize,
    random: RandomSpec,
) -> BiasResult {
    let errors = replicate(replications, random, |rng| problem.value_iteration_draw(oracle, rng) - problem.exact);
    BiasResult::from_errors("value-iteration", oracle.eta, &errors)
}

/// Mean of `C_tilde_k - C_k` for the stopping-time estimator.
pub fn bias_experiment_stopping_time(
    problem: &ThreeDateProblem,
    oracle: NoisyExpectationOracle,
    replications: usize,
    random: RandomSpec,
) -> BiasResult {
    let errors = replicate(replications, random, |rng| problem.stopping_time_draw(oracle, rng) - problem.exact);
    BiasResult::from_errors("stopping-time", oracle.eta, &errors)
}

pub fn write_bias_csv(path: &std::path::Path, rows: &[BiasResult], extra: &[(&str, String)]) -> Result<(), BiasLabError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = extra.iter().map(|(h, _)| *h).collect();
    header.extend(["experiment", "eta", "replications", "mean_bias", "halfwidth", "sign_test_p"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = extra.iter().map(|(_, v)| v.clone()).collect();
        rec.extend([
            r.experiment.clone(),
            r.eta.to_string(),
            r.replications.to_string(),
            format!("{:e}", r.mean_bias),
            format!("{:e}", r.halfwidth),
            format!("{:e}", r.sign_test_p),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn noiseless_oracle_has_no_bias() {
        let p = ThreeDateProblem::standard_put(20).unwrap();
        let oracle = NoisyExpectationOracle { eta: 0.0 };
        let r = RandomSpec::new(1, Stream::BiasLab);
        for res in [
            bias_experiment_value_iteration(&p, oracle, 100, r),
            bias_experiment_stopping_time(&p, oracle, 100, r),
        ] {
            assert!(res.mean_bias.abs() < 1e-12, "{res:?}");
        }
    }

    #[test]
    fn oracle_is_unbiased() {
        let oracle = NoisyExpectationOracle { eta: 0.7 };
        let r = RandomSpec::new(3, Stream::BiasLab);
        let draws = replicate(1_000_000, r, |rng| oracle.sample(2.5, rng));
        let (m, se) = stats::mean_and_stderr(&draws);
        assert!((m - 2.5).abs() < 4.0 * se, "{m} +- {se}");
    }
}
