//! Forward diffusions `dX = mu(X) dt + sigma(X) dW` on coarse and fine grids.
//!
//! Two families are supported: multi-asset Black-Scholes, where
//! `sigma(x) = diag(x) * F` for a constant factor `F` (a scaled Cholesky
//! factor of the correlation matrix, or a full volatility matrix driven by
//! independent Brownian motions), and the two-factor Heston model in
//! (log-price, variance) coordinates.

mod dump;
mod paths;

pub use dump::{read_dump, write_dump, DUMP_MAGIC, DUMP_VERSION};
pub use paths::{simulate, simulate_block, simulate_with_substeps, PathEnsemble};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is not symmetric (|a[{i}][{j}] - a[{j}][{i}]| = {gap})")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("matrix must be square {expected}x{expected}, got {rows}x{cols}")]
    Shape { expected: usize, rows: usize, cols: usize },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("fine substeps {requested} must divide the simulated level {available}")]
    IncompatibleRefinement { requested: usize, available: usize },
    #[error("path dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Equidistant coarse grid `t_k = k * T / N` with `J` fine substeps per interval.
///
/// All times are computed from the fine index `m = k * J + j` as `m * dt_fine`,
/// so `t_{k,J}` and `t_{k+1}` are the same floating-point number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    substeps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize, substeps: usize) -> Result<Self, MarketError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(MarketError::InvalidGrid(format!("horizon {horizon} must be positive")));
        }
        if steps == 0 || substeps == 0 {
            return Err(MarketError::InvalidGrid(format!(
                "need at least one step and substep, got N = {steps}, J = {substeps}"
            )));
        }
        Ok(Self { horizon, steps, substeps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn fine_dt(&self) -> f64 {
        self.horizon / (self.steps * self.substeps) as f64
    }

    /// Coarse time `t_k`.
    pub fn time(&self, k: usize) -> f64 {
        self.fine_time(k, 0)
    }

    /// Fine time `t_{k,j}`; `j` may equal `J`.
    pub fn fine_time(&self, k: usize, j: usize) -> f64 {
        let m = k * self.substeps + j;
        if m == self.steps * self.substeps {
            self.horizon
        } else {
            m as f64 * self.fine_dt()
        }
    }

    /// Same horizon and coarse steps, different substep count.
    pub fn with_substeps(&self, substeps: usize) -> Result<Self, MarketError> {
        Self::new(self.horizon, self.steps, substeps)
    }
}

/// Lower-triangular `L` with `L * L^T = a`.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, MarketError> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(MarketError::Shape { expected: rows, rows, cols });
    }
    let n = rows;
    for i in 0..n {
        for j in 0..i {
            let gap = (a[[i, j]] - a[[j, i]]).abs();
            if gap > 1e-10 {
                return Err(MarketError::NotSymmetric { i, j, gap });
            }
        }
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for p in 0..j {
            diag -= l[[j, p]] * l[[j, p]];
        }
        if diag <= 1e-12 || !diag.is_finite() {
            return Err(MarketError::NotPositiveDefinite { row: j, pivot: diag });
        }
        let pivot = diag.sqrt();
        l[[j, j]] = pivot;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for p in 0..j {
                s -= l[[i, p]] * l[[j, p]];
            }
            l[[i, j]] = s / pivot;
        }
    }
    Ok(l)
}

/// Multi-asset Black-Scholes: `mu(x) = (r - delta) x`, `sigma(x) = diag(x) F`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlackScholes {
    pub rate: f64,
    pub dividend: f64,
    pub x0: Vec<f64>,
    factor: Array2<f64>,
}

impl BlackScholes {
    /// Scalar volatility with a correlation matrix between the Brownian drivers.
    pub fn correlated(
        rate: f64,
        dividend: f64,
        sigma: f64,
        correlation: &Array2<f64>,
        x0: Vec<f64>,
    ) -> Result<Self, MarketError> {
        let l = cholesky(correlation)?;
        Self::with_factor(rate, dividend, l * sigma, x0)
    }

    /// Scalar volatility, constant pairwise correlation `rho`.
    pub fn uniform(rate: f64, dividend: f64, sigma: f64, rho: f64, x0: Vec<f64>) -> Result<Self, MarketError> {
        let d = x0.len();
        let corr = Array2::from_shape_fn((d, d), |(i, j)| if i == j { 1.0 } else { rho });
        Self::correlated(rate, dividend, sigma, &corr, x0)
    }

    /// `sigma(x) = diag(x) * matrix` with independent Brownian components.
    pub fn with_volatility_matrix(
        rate: f64,
        dividend: f64,
        matrix: Array2<f64>,
        x0: Vec<f64>,
    ) -> Result<Self, MarketError> {
        Self::with_factor(rate, dividend, matrix, x0)
    }

    fn with_factor(rate: f64, dividend: f64, factor: Array2<f64>, x0: Vec<f64>) -> Result<Self, MarketError> {
        let d = x0.len();
        if d == 0 {
            return Err(MarketError::InvalidModel("dimension must be at least 1".into()));
        }
        let (rows, cols) = factor.dim();
        if rows != d || cols != d {
            return Err(MarketError::Shape { expected: d, rows, cols });
        }
        if !(rate.is_finite() && dividend.is_finite()) || factor.iter().any(|v| !v.is_finite()) {
            return Err(MarketError::InvalidModel("non-finite Black-Scholes parameter".into()));
        }
        Ok(Self { rate, dividend, x0, factor })
    }

    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }
}

/// Heston in (log-price, variance) coordinates driven by two independent
/// Brownian motions; variance enters drift and diffusion through `max(v, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heston {
    pub rate: f64,
    pub kappa: f64,
    pub theta: f64,
    pub nu: f64,
    pub rho: f64,
    pub v0: f64,
}

impl Heston {
    pub fn new(rate: f64, kappa: f64, theta: f64, nu: f64, rho: f64, v0: f64) -> Result<Self, MarketError> {
        if ![rate, kappa, theta, nu, rho, v0].iter().all(|v| v.is_finite()) {
            return Err(MarketError::InvalidModel("non-finite Heston parameter".into()));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return Err(MarketError::InvalidModel(format!("correlation {rho} outside [-1, 1]")));
        }
        if kappa < 0.0 || theta < 0.0 || nu < 0.0 || v0 < 0.0 {
            return Err(MarketError::InvalidModel("kappa, theta, nu, v0 must be nonnegative".into()));
        }
        Ok(Self { rate, kappa, theta, nu, rho, v0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    BlackScholes(BlackScholes),
    Heston(Heston),
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::BlackScholes(bs) => bs.x0.len(),
            ModelSpec::Heston(_) => 2,
        }
    }

    pub fn rate(&self) -> f64 {
        match self {
            ModelSpec::BlackScholes(bs) => bs.rate,
            ModelSpec::Heston(h) => h.rate,
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match self {
            ModelSpec::BlackScholes(bs) => bs.x0.clone(),
            ModelSpec::Heston(h) => vec![0.0, h.v0],
        }
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ModelSpec::BlackScholes(bs) => x.iter().map(|xi| (bs.rate - bs.dividend) * xi).collect(),
            ModelSpec::Heston(h) => {
                let v = x[1].max(0.0);
                vec![h.rate - 0.5 * v, h.kappa * (h.theta - v)]
            }
        }
    }

    /// The matrix multiplying the independent Brownian increment at state `x`.
    pub fn diffusion_at(&self, x: &[f64]) -> Array2<f64> {
        match self {
            ModelSpec::BlackScholes(bs) => {
                let d = bs.x0.len();
                Array2::from_shape_fn((d, d), |(i, j)| x[i] * bs.factor[[i, j]])
            }
            ModelSpec::Heston(h) => {
                let sv = x[1].max(0.0).sqrt();
                let mut m = Array2::zeros((2, 2));
                m[[0, 0]] = h.rho * sv;
                m[[0, 1]] = (1.0 - h.rho * h.rho).sqrt() * sv;
                m[[1, 0]] = h.nu * sv;
                m
            }
        }
    }

    /// `out = sigma(x) * dw` without materializing the matrix.
    pub fn apply_diffusion(&self, x: &[f64], dw: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::BlackScholes(bs) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let row = bs.factor.row(i);
                    let mut s = 0.0;
                    for (f, w) in row.iter().zip(dw) {
                        s += f * w;
                    }
                    *o = x[i] * s;
                }
            }
            ModelSpec::Heston(h) => {
                let sv = x[1].max(0.0).sqrt();
                out[0] = sv * (h.rho * dw[0] + (1.0 - h.rho * h.rho).sqrt() * dw[1]);
                out[1] = h.nu * sv * dw[0];
            }
        }
    }

    /// One Euler-Maruyama step `x <- x + mu(x) dt + sigma(x) dw`, in place.
    pub fn euler_step(&self, x: &mut [f64], dw: &[f64], dt: f64) {
        match self {
            ModelSpec::BlackScholes(bs) => {
                let mu = bs.rate - bs.dividend;
                for (i, xi) in x.iter_mut().enumerate() {
                    let row = bs.factor.row(i);
                    let mut s = 0.0;
                    for (f, w) in row.iter().zip(dw) {
                        s += f * w;
                    }
                    *xi += *xi * (mu * dt + s);
                }
            }
            ModelSpec::Heston(h) => {
                let v = x[1].max(0.0);
                let sv = v.sqrt();
                x[0] += (h.rate - 0.5 * v) * dt + sv * (h.rho * dw[0] + (1.0 - h.rho * h.rho).sqrt() * dw[1]);
                x[1] += h.kappa * (h.theta - v) * dt + h.nu * sv * dw[0];
            }
        }
    }
}
