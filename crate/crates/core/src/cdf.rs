//! Conditional distribution function from a fitted quantile curve:
//! `F(y) = tau_l + |{tau in [tau_l, tau_u] : q(tau) < y}|`, discretized by
//! the midpoint rule.

use crate::error::{Error, Result};
use crate::projection::ProjectionMatrix;

pub const DEFAULT_N_INT: usize = 1000;

/// A quantile curve `tau -> q(tau)` on `[tau_l, tau_u]`.
pub struct QuantileCurve<'a> {
    pub tau_l: f64,
    pub tau_u: f64,
    eval: Box<dyn Fn(f64) -> Result<f64> + Send + Sync + 'a>,
}

impl<'a> QuantileCurve<'a> {
    pub fn new(tau_l: f64, tau_u: f64, eval: impl Fn(f64) -> Result<f64> + Send + Sync + 'a) -> Result<Self> {
        if !(tau_l < tau_u && tau_l.is_finite() && tau_u.is_finite()) {
            return Err(Error::Config(format!("invalid curve interval [{tau_l}, {tau_u}]")));
        }
        Ok(Self {
            tau_l,
            tau_u,
            eval: Box::new(eval),
        })
    }

    /// The curve `tau -> x0' beta(tau)` of a projected process.
    pub fn from_projection(xi: &'a ProjectionMatrix, x0: &'a [f64]) -> Result<Self> {
        if x0.len() != xi.m() {
            return Err(Error::Config(format!(
                "x0 has length {}, projection has m = {}",
                x0.len(),
                xi.m()
            )));
        }
        Self::new(xi.spec.lo(), xi.spec.hi(), move |t| xi.eval_linear(x0, t))
    }

    pub fn eval(&self, tau: f64) -> Result<f64> {
        (self.eval)(tau)
    }
}

/// Curve values at the `n_int` midpoints, reusable for many `y`.
#[derive(Debug, Clone)]
pub struct CdfEstimator {
    tau_l: f64,
    tau_u: f64,
    values: Vec<f64>,
}

impl CdfEstimator {
    pub fn new(curve: &QuantileCurve<'_>, n_int: usize) -> Result<Self> {
        if n_int == 0 {
            return Err(Error::Config("n_int must be at least 1".into()));
        }
        let width = (curve.tau_u - curve.tau_l) / n_int as f64;
        let values = (0..n_int)
            .map(|i| {
                let t = (curve.tau_l + (i as f64 + 0.5) * width).min(curve.tau_u);
                let v = curve.eval(t)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::numerical(format!("quantile curve is not finite at {t}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tau_l: curve.tau_l,
            tau_u: curve.tau_u,
            values,
        })
    }

    pub fn eval(&self, y: f64) -> f64 {
        // strict inequality: ties are not below y
        let below = self.values.iter().filter(|&&q| q < y).count();
        let f = self.tau_l + (self.tau_u - self.tau_l) * below as f64 / self.values.len() as f64;
        f.clamp(self.tau_l, self.tau_u)
    }
}

/// `F(y)` for a single `y`.
pub fn estimate_cdf(curve: &QuantileCurve<'_>, y: f64, n_int: usize) -> Result<f64> {
    Ok(CdfEstimator::new(curve, n_int)?.eval(y))
}
