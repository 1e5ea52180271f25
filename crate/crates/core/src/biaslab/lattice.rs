//! Cox-Ross-Rubinstein binomial tree working in discounted units: node values
//! are discounted rewards, so backward induction is a plain expectation.

use super::BiasLabError;
use crate::payoff::{PayoffKind, PayoffSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeModel {
    pub s0: f64,
    /// Discount rate applied to rewards.
    pub rate: f64,
    /// Continuous dividend yield (drift is `rate - dividend`).
    pub dividend: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl LatticeModel {
    pub fn new(s0: f64, rate: f64, dividend: f64, sigma: f64, horizon: f64, steps: usize) -> Result<Self, BiasLabError> {
        let m = Self { s0, rate, dividend, sigma, horizon, steps };
        if !(s0 > 0.0 && horizon > 0.0 && sigma >= 0.0) || steps == 0 {
            return Err(BiasLabError::InvalidLattice("need s0 > 0, T > 0, sigma >= 0 and at least one step".into()));
        }
        let p = m.probability();
        if !(p > 0.0 && p < 1.0) {
            return Err(BiasLabError::InvalidLattice(format!("risk-neutral probability {p} outside (0, 1)")));
        }
        Ok(m)
    }

    /// One-dimensional tree for the geometric mean of `d` assets with common
    /// volatility `sigma` and pairwise correlation `rho`: a GBM with volatility
    /// `sigma_bar^2 = sigma^2 (1 + (d - 1) rho) / d` and adjusted dividend
    /// `delta + (sigma^2 - sigma_bar^2) / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn geometric_basket(
        s0: f64,
        rate: f64,
        dividend: f64,
        sigma: f64,
        rho: f64,
        dim: usize,
        horizon: f64,
        steps: usize,
    ) -> Result<Self, BiasLabError> {
        let d = dim as f64;
        let var_bar = sigma * sigma * (1.0 + (d - 1.0) * rho) / d;
        let div_bar = dividend + 0.5 * (sigma * sigma - var_bar);
        Self::new(s0, rate, div_bar, var_bar.sqrt(), horizon, steps)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn up(&self) -> f64 {
        if self.sigma == 0.0 {
            ((self.rate - self.dividend) * self.dt()).exp()
        } else {
            (self.sigma * self.dt().sqrt()).exp()
        }
    }

    pub fn down(&self) -> f64 {
        if self.sigma == 0.0 {
            self.up()
        } else {
            1.0 / self.up()
        }
    }

    pub fn probability(&self) -> f64 {
        if self.sigma == 0.0 {
            return 0.5;
        }
        let growth = ((self.rate - self.dividend) * self.dt()).exp();
        (growth - self.down()) / (self.up() - self.down())
    }

    pub fn time(&self, step: usize) -> f64 {
        self.horizon * step as f64 / self.steps as f64
    }

    /// Price at node `j` (number of up moves) after `step` steps.
    pub fn price(&self, step: usize, j: usize) -> f64 {
        self.s0 * self.up().powi(j as i32) * self.down().powi((step - j) as i32)
    }

    /// Probability of each node at `step`, starting from the root.
    pub fn node_probabilities(&self, step: usize) -> Vec<f64> {
        let p = self.probability();
        let mut probs = vec![1.0];
        for _ in 0..step {
            let mut next = vec![0.0; probs.len() + 1];
            for (j, &q) in probs.iter().enumerate() {
                next[j] += q * (1.0 - p);
                next[j + 1] += q * p;
            }
            probs = next;
        }
        probs
    }
}

/// One-dimensional vanilla reward on the tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatticePayoff {
    Call { strike: f64 },
    Put { strike: f64 },
}

impl LatticePayoff {
    /// Undiscounted intrinsic value.
    pub fn intrinsic(&self, s: f64) -> f64 {
        match *self {
            LatticePayoff::Call { strike } => (s - strike).max(0.0),
            LatticePayoff::Put { strike } => (strike - s).max(0.0),
        }
    }

    /// A geometric basket call maps to a call on the reduced tree.
    pub fn from_spec(spec: &PayoffSpec) -> Result<Self, BiasLabError> {
        match spec.kind {
            PayoffKind::GeometricBasketCall => Ok(LatticePayoff::Call { strike: spec.strike }),
            other => Err(BiasLabError::InvalidLattice(format!("{other:?} has no one-dimensional tree reduction"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExerciseStyle {
    European,
    /// Exercise allowed at `t_m = m T / N`, `m = 1..=N`.
    Bermudan(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSolution {
    pub model: LatticeModel,
    pub payoff: LatticePayoff,
    /// Continuation value at the root (no exercise at time zero).
    pub price: f64,
    /// Tree step of each exercise date `t_0, ..., t_N`.
    pub dates: Vec<usize>,
    /// Discounted continuation values on the nodes of each date.
    pub continuation: Vec<Vec<f64>>,
    /// Critical price at each date: lowest exercised node for calls, highest
    /// for puts; `None` where exercise never happens.
    pub boundary: Vec<Option<f64>>,
}

pub fn lattice_price(model: &LatticeModel, payoff: LatticePayoff, style: ExerciseStyle) -> Result<LatticeSolution, BiasLabError> {
    let n_dates = match style {
        ExerciseStyle::European => 1,
        ExerciseStyle::Bermudan(n) => n,
    };
    if n_dates == 0 || !model.steps.is_multiple_of(n_dates) {
        return Err(BiasLabError::IncompatibleGrid { steps: model.steps, dates: n_dates });
    }
    let stride = model.steps / n_dates;
    let early = matches!(style, ExerciseStyle::Bermudan(_));
    let p = model.probability();
    let reward = |step: usize, j: usize| (-model.rate * model.time(step)).exp() * payoff.intrinsic(model.price(step, j));

    let mut values: Vec<f64> = (0..=model.steps).map(|j| reward(model.steps, j)).collect();
    let mut continuation = vec![Vec::new(); n_dates + 1];
    let mut boundary = vec![None; n_dates + 1];
    continuation[n_dates] = vec![0.0; model.steps + 1];
    boundary[n_dates] = exercise_boundary(model, payoff, model.steps, &continuation[n_dates], &reward);
    for step in (0..model.steps).rev() {
        for j in 0..=step {
            values[j] = (1.0 - p) * values[j] + p * values[j + 1];
        }
        values.truncate(step + 1);
        if step % stride == 0 {
            let date = step / stride;
            continuation[date] = values.clone();
            if early && date > 0 {
                boundary[date] = exercise_boundary(model, payoff, step, &values, &reward);
                for (j, v) in values.iter_mut().enumerate() {
                    *v = v.max(reward(step, j));
                }
            }
        }
    }
    Ok(LatticeSolution {
        model: *model,
        payoff,
        price: values[0],
        dates: (0..=n_dates).map(|m| m * stride).collect(),
        continuation,
        boundary,
    })
}

fn exercise_boundary(
    model: &LatticeModel,
    payoff: LatticePayoff,
    step: usize,
    continuation: &[f64],
    reward: &dyn Fn(usize, usize) -> f64,
) -> Option<f64> {
    let exercised = (0..=step).filter(|&j| {
        let g = reward(step, j);
        g > 0.0 && g >= continuation[j]
    });
    match payoff {
        LatticePayoff::Call { .. } => exercised.min(),
        LatticePayoff::Put { .. } => exercised.max(),
    }
    .map(|j| model.price(step, j))
}

impl LatticeSolution {
    /// Continuation value at date `m` and spot `s`, linear in `log s` between
    /// nodes and clamped outside the tree.
    pub fn continuation_at(&self, m: usize, s: f64) -> f64 {
        let (j, w) = self.locate(m, s);
        let c = &self.continuation[m];
        if c.len() == 1 {
            return c[0];
        }
        c[j] * (1.0 - w) + c[j + 1] * w
    }

    /// `d/ds` of the continuation value at date `m`: the slope of the node
    /// segment containing `s`.
    pub fn continuation_delta(&self, m: usize, s: f64) -> f64 {
        let step = self.dates[m];
        let c = &self.continuation[m];
        if c.len() == 1 {
            return 0.0;
        }
        let (j, _) = self.locate(m, s);
        let (s0, s1) = (self.model.price(step, j), self.model.price(step, j + 1));
        (c[j + 1] - c[j]) / (s1 - s0)
    }

    fn locate(&self, m: usize, s: f64) -> (usize, f64) {
        let step = self.dates[m];
        if step == 0 {
            return (0, 0.0);
        }
        let lo = self.model.price(step, 0).ln();
        let hi = self.model.price(step, step).ln();
        if hi <= lo {
            return (0, 0.0);
        }
        let pos = ((s.ln() - lo) / (hi - lo) * step as f64).clamp(0.0, step as f64);
        let j = (pos.floor() as usize).min(step - 1);
        (j, pos - j as f64)
    }
}

/// Black-Scholes price of a European call or put with continuous dividends.
pub fn black_scholes(s0: f64, rate: f64, dividend: f64, sigma: f64, horizon: f64, payoff: LatticePayoff) -> f64 {
    use crate::stats::normal_cdf;
    let sd = sigma * horizon.sqrt();
    let (strike, call) = match payoff {
        LatticePayoff::Call { strike } => (strike, true),
        LatticePayoff::Put { strike } => (strike, false),
    };
    let fwd = s0 * ((rate - dividend) * horizon).exp();
    let disc = (-rate * horizon).exp();
    if sd == 0.0 {
        return disc * payoff.intrinsic(fwd);
    }
    let d1 = ((fwd / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    if call {
        disc * (fwd * normal_cdf(d1) - strike * normal_cdf(d2))
    } else {
        disc * (strike * normal_cdf(-d2) - fwd * normal_cdf(-d1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_reference() {
        let c = black_scholes(100.0, 0.0, 0.0, 0.25, 2.0, LatticePayoff::Call { strike: 100.0 });
        assert!((c - 14.0316).abs() < 1e-4, "{c}");
        // put-call parity
        let p = black_scholes(100.0, 0.05, 0.02, 0.3, 1.0, LatticePayoff::Put { strike: 95.0 });
        let cc = black_scholes(100.0, 0.05, 0.02, 0.3, 1.0, LatticePayoff::Call { strike: 95.0 });
        let parity = 100.0 * (-0.02f64).exp() - 95.0 * (-0.05f64).exp();
        assert!((cc - p - parity).abs() < 1e-10);
    }

    #[test]
    fn european_tree_matches_closed_form() {
        let m = LatticeModel::new(100.0, 0.0, 0.0, 0.25, 2.0, 2000).unwrap();
        let payoff = LatticePayoff::Call { strike: 100.0 };
        let sol = lattice_price(&m, payoff, ExerciseStyle::European).unwrap();
        let exact = black_scholes(100.0, 0.0, 0.0, 0.25, 2.0, payoff);
        assert!((sol.price - exact).abs() < 0.01, "{} vs {exact}", sol.price);
    }

    #[test]
    fn single_date_bermudan_is_european() {
        let m = LatticeModel::new(100.0, 0.05, 0.0, 0.2, 1.0, 300).unwrap();
        let put = LatticePayoff::Put { strike: 105.0 };
        let e = lattice_price(&m, put, ExerciseStyle::European).unwrap();
        let b = lattice_price(&m, put, ExerciseStyle::Bermudan(1)).unwrap();
        assert_eq!(e.price, b.price);
    }

    #[test]
    fn date_count_must_divide_steps() {
        let m = LatticeModel::new(100.0, 0.05, 0.0, 0.2, 1.0, 100).unwrap();
        assert!(matches!(
            lattice_price(&m, LatticePayoff::Put { strike: 100.0 }, ExerciseStyle::Bermudan(3)),
            Err(BiasLabError::IncompatibleGrid { .. })
        ));
    }

    #[test]
    fn put_boundary_below_strike() {
        let m = LatticeModel::new(100.0, 0.05, 0.0, 0.2, 1.0, 400).unwrap();
        let sol = lattice_price(&m, LatticePayoff::Put { strike: 100.0 }, ExerciseStyle::Bermudan(10)).unwrap();
        for b in sol.boundary[1..10].iter().flatten() {
            assert!(*b < 100.0);
        }
        let probs = m.node_probabilities(40);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
