//! Discounted rewards `g(t, x) = max(phi(t, x), 0)` and the signed feature `phi`
//! that the value subnetwork receives as an extra input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PayoffError {
    #[error("payoff expects a state of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid payoff: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffKind {
    GeometricBasketCall,
    StrangleSpread,
    HestonPut,
    MaxCall,
}

/// Strangle-spread shape: zero within `STRANGLE_INNER - STRANGLE_CAP` of the
/// center, ramping linearly to `STRANGLE_CAP`.
const STRANGLE_CAP: f64 = 15.0;
const STRANGLE_INNER: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    pub kind: PayoffKind,
    /// Strike; for the strangle spread this is the center of the basket mean.
    pub strike: f64,
    /// Discount rate in `e^{-rt}`.
    pub rate: f64,
    /// Initial spot `s_0` for the Heston put (state holds the log-price).
    pub spot_scale: f64,
    pub dim: usize,
}

impl PayoffSpec {
    pub fn new(kind: PayoffKind, strike: f64, rate: f64, dim: usize) -> Result<Self, PayoffError> {
        Self::with_spot_scale(kind, strike, rate, 1.0, dim)
    }

    pub fn with_spot_scale(
        kind: PayoffKind,
        strike: f64,
        rate: f64,
        spot_scale: f64,
        dim: usize,
    ) -> Result<Self, PayoffError> {
        if !(strike.is_finite() && strike > 0.0) {
            return Err(PayoffError::Invalid(format!("strike {strike} must be positive")));
        }
        if !(spot_scale.is_finite() && spot_scale > 0.0) || !rate.is_finite() {
            return Err(PayoffError::Invalid("rate and spot scale must be finite, spot scale positive".into()));
        }
        if dim == 0 || (kind == PayoffKind::HestonPut && dim != 2) {
            return Err(PayoffError::Invalid(format!("dimension {dim} incompatible with {kind:?}")));
        }
        Ok(Self { kind, strike, rate, spot_scale, dim })
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.rate * t).exp()
    }

    /// Signed discounted moneyness `phi(t, x)`.
    pub fn feature(&self, t: f64, x: &[f64]) -> Result<f64, PayoffError> {
        self.check(x)?;
        Ok(self.feature_of(t, x))
    }

    /// `g(t, x) = max(phi(t, x), 0)`.
    pub fn reward(&self, t: f64, x: &[f64]) -> Result<f64, PayoffError> {
        self.check(x)?;
        Ok(self.reward_of(t, x))
    }

    fn check(&self, x: &[f64]) -> Result<(), PayoffError> {
        if x.len() != self.dim {
            return Err(PayoffError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    pub fn feature_of(&self, t: f64, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let inner = match self.kind {
            PayoffKind::GeometricBasketCall => geometric_mean(x) - self.strike,
            PayoffKind::StrangleSpread => {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                STRANGLE_CAP - (STRANGLE_INNER - (m - self.strike).abs()).max(0.0)
            }
            PayoffKind::HestonPut => self.strike - self.spot_scale * x[0].exp(),
            PayoffKind::MaxCall => x.iter().copied().fold(f64::NEG_INFINITY, f64::max) - self.strike,
        };
        self.discount(t) * inner
    }

    pub fn reward_of(&self, t: f64, x: &[f64]) -> f64 {
        self.feature_of(t, x).max(0.0)
    }
}

/// `(prod x_j)^{1/d}` via the mean of logs; zero if any component is nonpositive.
pub fn geometric_mean(x: &[f64]) -> f64 {
    if x.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    (x.iter().map(|v| v.ln()).sum::<f64>() / x.len() as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn geometric_basket_equal_components() {
        for d in [1, 3, 20, 200] {
            let p = PayoffSpec::new(PayoffKind::GeometricBasketCall, 100.0, 0.0, d).unwrap();
            let g = p.reward(0.7, &vec![110.0; d]).unwrap();
            assert!((g - 10.0).abs() < 1e-10, "d = {d}: {g}");
            let f = p.feature(0.7, &vec![90.0; d]).unwrap();
            assert!((f + 10.0).abs() < 1e-10);
        }
    }

    #[test]
    fn geometric_mean_survives_overflow_sizes() {
        let x = vec![1e300; 4];
        assert!((geometric_mean(&x) / 1e300 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn strangle_center_is_zero() {
        let p = PayoffSpec::new(PayoffKind::StrangleSpread, 100.0, 0.0, 5).unwrap();
        let x = [90.0, 110.0, 100.0, 95.0, 105.0];
        assert_eq!(p.reward(0.0, &x).unwrap(), 0.0);
        assert_eq!(p.feature(0.0, &x).unwrap(), -10.0);
        assert_eq!(p.reward(0.0, &[120.0; 5]).unwrap(), 10.0);
        assert_eq!(p.reward(0.0, &[60.0; 5]).unwrap(), 15.0);
    }

    #[test]
    fn max_call_is_undiscounted_at_zero() {
        let p = PayoffSpec::new(PayoffKind::MaxCall, 100.0, 0.05, 2).unwrap();
        assert_eq!(p.reward(0.0, &[90.0, 120.0]).unwrap(), 20.0);
        let p0 = PayoffSpec::new(PayoffKind::MaxCall, 100.0, 0.0, 2).unwrap();
        assert_eq!(p0.feature(1.3, &[90.0, 120.0]).unwrap(), 20.0);
    }

    #[test]
    fn heston_put_at_the_money() {
        let p = PayoffSpec::with_spot_scale(PayoffKind::HestonPut, 10.0, 0.1, 10.0, 2).unwrap();
        assert_eq!(p.reward(0.1, &[0.0, 0.04]).unwrap(), 0.0);
        assert!(PayoffSpec::new(PayoffKind::HestonPut, 10.0, 0.1, 3).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let p = PayoffSpec::new(PayoffKind::MaxCall, 100.0, 0.0, 2).unwrap();
        assert_eq!(
            p.reward(0.0, &[1.0, 2.0, 3.0]),
            Err(PayoffError::DimensionMismatch { expected: 2, got: 3 })
        );
        assert!(p.feature(0.0, &[1.0]).is_err());
    }

    fn kinds() -> impl Strategy<Value = (PayoffKind, usize)> {
        prop_oneof![
            (1usize..6).prop_map(|d| (PayoffKind::GeometricBasketCall, d)),
            (1usize..6).prop_map(|d| (PayoffKind::StrangleSpread, d)),
            Just((PayoffKind::HestonPut, 2)),
            (1usize..6).prop_map(|d| (PayoffKind::MaxCall, d)),
        ]
    }

    proptest! {
        #[test]
        fn reward_is_relu_of_feature(
            (kind, d) in kinds(),
            rate in -0.1f64..0.2,
            t in 0.0f64..3.0,
            xs in prop::collection::vec(1.0f64..250.0, 6),
        ) {
            let p = PayoffSpec::with_spot_scale(kind, 100.0, rate, 10.0, d).unwrap();
            let mut x = xs[..d].to_vec();
            if kind == PayoffKind::HestonPut {
                x[0] = (x[0] / 100.0).ln();
            }
            let g = p.reward(t, &x).unwrap();
            let f = p.feature(t, &x).unwrap();
            prop_assert!(g >= 0.0);
            prop_assert_eq!(g, f.max(0.0));
            let undiscounted = PayoffSpec { rate: 0.0, ..p.clone() }.reward(0.0, &x).unwrap();
            prop_assert!((g - (-rate * t).exp() * undiscounted).abs() <= 1e-12 * (1.0 + undiscounted));
        }
    }
}
