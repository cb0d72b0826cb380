//! Normalized B-spline bases on equidistant breakpoints.
//!
//! Used both for the basis over quantile levels (projection) and for the
//! covariate transform `Z(x)` of nonparametric models.

use crate::error::{Error, Result};

/// A B-spline space on `D` equidistant breakpoints spanning `[lo, hi]`.
///
/// With `clamped`, the end breakpoints are repeated `degree + 1` times;
/// otherwise the knot sequence is extended beyond the interval with the same
/// spacing. Either way the basis restricted to `[lo, hi]` has dimension
/// `q = D - 1 + degree`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSpec {
    degree: usize,
    lo: f64,
    hi: f64,
    breakpoints: Vec<f64>,
    clamped: bool,
    knots: Vec<f64>,
}

/// Values of all `q` basis functions at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisVector {
    pub values: Vec<f64>,
    /// Index of the first of the (at most `degree + 1`) nonzero entries.
    pub support_start: usize,
}

impl BasisVector {
    /// Nonzero window `values[support_start..support_start + len]`.
    pub fn support(&self, degree: usize) -> &[f64] {
        let end = (self.support_start + degree + 1).min(self.values.len());
        &self.values[self.support_start..end]
    }
}

impl SplineSpec {
    pub fn new(degree: usize, lo: f64, hi: f64, breakpoints: usize, clamped: bool) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid spline interval [{lo}, {hi}]")));
        }
        if breakpoints < 2 {
            return Err(Error::Config(format!(
                "need at least 2 breakpoints, got {breakpoints}"
            )));
        }
        let spacing = (hi - lo) / (breakpoints - 1) as f64;
        let mut bp: Vec<f64> = (0..breakpoints)
            .map(|i| lo + (hi - lo) * i as f64 / (breakpoints - 1) as f64)
            .collect();
        bp[breakpoints - 1] = hi;

        let mut knots = Vec::with_capacity(breakpoints + 2 * degree);
        if clamped {
            knots.extend(std::iter::repeat_n(lo, degree));
            knots.extend_from_slice(&bp);
            knots.extend(std::iter::repeat_n(hi, degree));
        } else {
            knots.extend((1..=degree).rev().map(|i| lo - spacing * i as f64));
            knots.extend_from_slice(&bp);
            knots.extend((1..=degree).map(|i| hi + spacing * i as f64));
        }
        Ok(Self {
            degree,
            lo,
            hi,
            breakpoints: bp,
            clamped,
            knots,
        })
    }

    /// Clamped spec with the requested basis dimension `q` (`D = q - degree + 1`).
    pub fn clamped_with_dimension(degree: usize, lo: f64, hi: f64, q: usize) -> Result<Self> {
        if q < degree + 1 {
            return Err(Error::Config(format!(
                "basis dimension {q} too small for degree {degree}"
            )));
        }
        Self::new(degree, lo, hi, q - degree + 1, true)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn clamped(&self) -> bool {
        self.clamped
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Full knot vector, including repeated or extended end knots.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Basis dimension `q = D - 1 + degree`.
    pub fn dimension(&self) -> usize {
        self.breakpoints.len() - 1 + self.degree
    }

    /// Index of the breakpoint interval containing `t` (right end belongs to the last one).
    pub fn span_of(&self, t: f64) -> usize {
        let d = self.breakpoints.len();
        let h = (self.hi - self.lo) / (d - 1) as f64;
        let mut j = (((t - self.lo) / h).floor().max(0.0) as usize).min(d - 2);
        // guard against rounding at breakpoints
        while j > 0 && t < self.breakpoints[j] {
            j -= 1;
        }
        while j + 2 < d && t >= self.breakpoints[j + 1] {
            j += 1;
        }
        j
    }

    /// Cox-de Boor evaluation of all basis functions at `t`.
    pub fn eval(&self, t: f64) -> Result<BasisVector> {
        if !(t >= self.lo && t <= self.hi) {
            return Err(Error::Domain(format!(
                "{t} outside spline interval [{}, {}]",
                self.lo, self.hi
            )));
        }
        let p = self.degree;
        let span = self.span_of(t) + p;
        let u = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = n[r] / denom;
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut values = vec![0.0; self.dimension()];
        let start = span - p;
        values[start..start + p + 1].copy_from_slice(&n);
        Ok(BasisVector {
            values,
            support_start: start,
        })
    }
}

/// Normalized B-spline basis vector `B(t)`.
pub fn eval_basis(spec: &SplineSpec, t: f64) -> Result<BasisVector> {
    spec.eval(t)
}

/// Covariate transform `Z(x) = m^{1/2} B(x)` for a basis of dimension `m`.
pub fn eval_covariate_basis(spec: &SplineSpec, x: f64, m: usize) -> Result<Vec<f64>> {
    if spec.dimension() != m {
        return Err(Error::Config(format!(
            "covariate basis has dimension {}, expected {m}",
            spec.dimension()
        )));
    }
    let scale = (m as f64).sqrt();
    Ok(spec.eval(x)?.values.into_iter().map(|v| v * scale).collect())
}
