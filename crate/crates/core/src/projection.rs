//! Quantile grids and the least-squares projection of pooled grid
//! estimates onto a spline space in the quantile level.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::SplineSpec;

/// Strictly increasing quantile levels in (0, 1).
///
/// Grids built by [`make_grid`] remember their range `[tau_l, tau_u]`; the
/// lower end itself is not a grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    points: Vec<f64>,
    range: Option<(f64, f64)>,
}

impl QuantileGrid {
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("empty quantile grid".into()));
        }
        if points.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config("quantile grid points must lie in (0, 1)".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("quantile grid must be strictly increasing".into()));
        }
        Ok(Self {
            points,
            range: None,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(tau_l, tau_u)` for grids built by [`make_grid`].
    pub fn range(&self) -> Option<(f64, f64)> {
        self.range
    }
}

/// Grid `tau_k = tau_l + (k / K)(tau_u - tau_l)`, `k = 1..K`.
pub fn make_grid(tau_l: f64, tau_u: f64, k: usize) -> Result<QuantileGrid> {
    if !(tau_l > 0.0 && tau_l < tau_u && tau_u < 1.0) {
        return Err(Error::Config(format!(
            "grid bounds must satisfy 0 < tau_l < tau_u < 1, got [{tau_l}, {tau_u}]"
        )));
    }
    if k == 0 {
        return Err(Error::Config("grid needs K >= 1".into()));
    }
    let mut points: Vec<f64> = (1..=k)
        .map(|i| tau_l + (i as f64 / k as f64) * (tau_u - tau_l))
        .collect();
    points[k - 1] = tau_u;
    Ok(QuantileGrid {
        points,
        range: Some((tau_l, tau_u)),
    })
}

/// The matrix `Xi` (q x m) whose columns are spline coefficients of the
/// projected coefficient paths; `beta(tau) = Xi' B(tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub xi: DMatrix<f64>,
    pub spec: SplineSpec,
}

impl ProjectionMatrix {
    pub fn m(&self) -> usize {
        self.xi.ncols()
    }

    /// Projected coefficient vector at `tau`; no extrapolation outside the spline interval.
    pub fn eval(&self, tau: f64) -> Result<Vec<f64>> {
        let b = self.spec.eval(tau)?;
        let p = self.spec.degree();
        let start = b.support_start;
        let mut out = vec![0.0; self.m()];
        for (offset, &bv) in b.support(p).iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += bv * self.xi[(start + offset, j)];
            }
        }
        Ok(out)
    }

    /// The scalar curve `tau -> x0' beta(tau)`.
    pub fn eval_linear(&self, x0: &[f64], tau: f64) -> Result<f64> {
        if x0.len() != self.m() {
            return Err(Error::Config(format!(
                "x0 has length {}, expected {}",
                x0.len(),
                self.m()
            )));
        }
        Ok(self.eval(tau)?.iter().zip(x0).map(|(b, x)| b * x).sum())
    }

    pub fn to_json(&self) -> ProjectionJson {
        ProjectionJson {
            tau_l: self.spec.lo(),
            tau_u: self.spec.hi(),
            degree: self.spec.degree(),
            breakpoints: self.spec.breakpoints().to_vec(),
            xi: self
                .xi
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }

    pub fn from_json(json: &ProjectionJson) -> Result<Self> {
        let spec = SplineSpec::new(json.degree, json.tau_l, json.tau_u, json.breakpoints.len(), true)?;
        for (a, b) in spec.breakpoints().iter().zip(&json.breakpoints) {
            if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                return Err(Error::Config("breakpoints are not equidistant on [tau_l, tau_u]".into()));
            }
        }
        let q = spec.dimension();
        if json.xi.len() != q {
            return Err(Error::Config(format!("xi has {} rows, basis has {q}", json.xi.len())));
        }
        let m = json.xi.first().map_or(0, Vec::len);
        if m == 0 || json.xi.iter().any(|r| r.len() != m) {
            return Err(Error::Config("xi rows are empty or ragged".into()));
        }
        let xi = DMatrix::from_fn(q, m, |r, c| json.xi[r][c]);
        Ok(Self { xi, spec })
    }
}

/// JSON layout of a serialized projection matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionJson {
    pub tau_l: f64,
    pub tau_u: f64,
    pub degree: usize,
    pub breakpoints: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
}

/// Factorized normal equations for one (grid, spline) pair; reusable across
/// many right-hand sides such as bootstrap replicates.
#[derive(Debug, Clone)]
pub struct Projector {
    spec: SplineSpec,
    grid: QuantileGrid,
    /// `B(tau_k)` for every grid point, `K x q`.
    basis_at_grid: DMatrix<f64>,
    /// Banded Cholesky factor of the Gram matrix (dense storage, lower triangle).
    chol: DMatrix<f64>,
}

impl Projector {
    pub fn new(grid: &QuantileGrid, spec: &SplineSpec) -> Result<Self> {
        let q = spec.dimension();
        let k = grid.len();
        if k < q {
            return Err(Error::Config(format!(
                "projection needs at least q = {q} grid points, got K = {k}"
            )));
        }
        let mut basis_at_grid = DMatrix::zeros(k, q);
        for (row, &t) in grid.points().iter().enumerate() {
            let b = spec.eval(t).map_err(|_| {
                Error::Config(format!(
                    "grid point {t} outside spline interval [{}, {}]",
                    spec.lo(),
                    spec.hi()
                ))
            })?;
            for (c, v) in b.values.iter().enumerate() {
                basis_at_grid[(row, c)] = *v;
            }
        }
        let gram = basis_at_grid.transpose() * &basis_at_grid;
        let chol = banded_cholesky(&gram, spec.degree()).map_err(|i| {
            let span = deficient_span(grid, spec, i);
            Error::Numerical {
                message: format!(
                    "projection Gram matrix is singular at basis function {i}: knot span \
                     [{:.6}, {:.6}] holds too few grid points",
                    spec.breakpoints()[span],
                    spec.breakpoints()[span + 1]
                ),
                condition: None,
            }
        })?;
        Ok(Self {
            spec: spec.clone(),
            grid: grid.clone(),
            basis_at_grid,
            chol,
        })
    }

    pub fn spec(&self) -> &SplineSpec {
        &self.spec
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    /// Least-squares spline coefficients for every column of `beta_bar` (K x m).
    pub fn project(&self, beta_bar: &DMatrix<f64>) -> Result<ProjectionMatrix> {
        if beta_bar.nrows() != self.grid.len() {
            return Err(Error::Config(format!(
                "beta_bar has {} rows, grid has {} points",
                beta_bar.nrows(),
                self.grid.len()
            )));
        }
        let mut xi = self.basis_at_grid.transpose() * beta_bar;
        for mut col in xi.column_iter_mut() {
            let mut v: Vec<f64> = col.iter().copied().collect();
            self.solve_in_place(&mut v);
            col.iter_mut().zip(v).for_each(|(c, x)| *c = x);
        }
        Ok(ProjectionMatrix {
            xi,
            spec: self.spec.clone(),
        })
    }

    /// Weights `A_k(tau) = B(tau)' G^{-1} B(tau_k)` of every grid value in the projected curve at `tau`.
    pub fn weights(&self, tau: f64) -> Result<Vec<f64>> {
        let mut w = self.spec.eval(tau)?.values;
        self.solve_in_place(&mut w);
        Ok(self
            .basis_at_grid
            .row_iter()
            .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn solve_in_place(&self, v: &mut [f64]) {
        let q = v.len();
        let bw = self.spec.degree();
        let l = &self.chol;
        for i in 0..q {
            let mut s = v[i];
            for j in i.saturating_sub(bw)..i {
                s -= l[(i, j)] * v[j];
            }
            v[i] = s / l[(i, i)];
        }
        for i in (0..q).rev() {
            let mut s = v[i];
            for j in i + 1..(i + bw + 1).min(q) {
                s -= l[(j, i)] * v[j];
            }
            v[i] = s / l[(i, i)];
        }
    }
}

/// Cholesky factorization restricted to a band of half-width `bw`. Returns
/// the index of the first nonpositive pivot on failure.
fn banded_cholesky(a: &DMatrix<f64>, bw: usize) -> std::result::Result<DMatrix<f64>, usize> {
    let q = a.nrows();
    let scale = (0..q).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let mut l = DMatrix::zeros(q, q);
    for i in 0..q {
        let lo = i.saturating_sub(bw);
        for j in lo..=i {
            let mut s = a[(i, j)];
            for k in lo.max(j.saturating_sub(bw))..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 1e-13 * scale || !s.is_finite() {
                    return Err(i);
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Breakpoint interval in the support of basis function `i` holding the fewest grid points.
fn deficient_span(grid: &QuantileGrid, spec: &SplineSpec, i: usize) -> usize {
    let spans = spec.breakpoints().len() - 1;
    let p = spec.degree();
    let mut counts = vec![0usize; spans];
    for &t in grid.points() {
        counts[spec.span_of(t)] += 1;
    }
    let first = i.saturating_sub(p).min(spans - 1);
    let last = i.min(spans - 1);
    (first..=last).min_by_key(|&s| counts[s]).unwrap_or(first)
}

/// Projects each column of `beta_bar` (K x m) onto the spline space.
pub fn project(beta_bar: &DMatrix<f64>, grid: &QuantileGrid, spec: &SplineSpec) -> Result<ProjectionMatrix> {
    Projector::new(grid, spec)?.project(beta_bar)
}

/// `beta(tau) = Xi' B(tau)`.
pub fn eval_projected(xi: &ProjectionMatrix, tau: f64) -> Result<Vec<f64>> {
    xi.eval(tau)
}

/// Linear weight `A_k(tau)` of the pooled estimate at grid point `k` (0-based) in `beta(tau)`.
pub fn projection_weight(grid: &QuantileGrid, spec: &SplineSpec, tau: f64, k: usize) -> Result<f64> {
    if k >= grid.len() {
        return Err(Error::Config(format!("grid index {k} out of range")));
    }
    Ok(Projector::new(grid, spec)?.weights(tau)?[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(d: usize) -> SplineSpec {
        SplineSpec::new(3, 0.05, 0.95, d, true).unwrap()
    }

    fn sampled(grid: &QuantileGrid, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        DMatrix::from_iterator(grid.len(), 1, grid.points().iter().map(|&t| f(t)))
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(0.05, 0.95, 4).unwrap();
        for (a, b) in g.points().iter().zip([0.275, 0.5, 0.725, 0.95]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(make_grid(0.05, 0.95, 1).unwrap().points(), &[0.95]);
        let g = make_grid(0.05, 0.95, 1000).unwrap();
        assert!(g.points().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*g.points().last().unwrap(), 0.95);
        assert!(g.points()[0] > 0.05);
        assert!(make_grid(0.0, 0.95, 4).is_err());
        assert!(make_grid(0.5, 0.4, 4).is_err());
        assert!(make_grid(0.05, 0.95, 0).is_err());
    }

    #[test]
    fn constants_are_reproduced() {
        let grid = make_grid(0.05, 0.95, 40).unwrap();
        let xi = project(&sampled(&grid, |_| 2.5), &grid, &cubic(5)).unwrap();
        for t in [0.05, 0.3, 0.77, 0.95] {
            assert!((eval_projected(&xi, t).unwrap()[0] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_quantile_family_is_reproduced() {
        let grid = make_grid(0.05, 0.95, 65).unwrap();
        let spec = SplineSpec::clamped_with_dimension(3, 0.05, 0.95, 8).unwrap();
        let xi = project(&sampled(&grid, |t| t * t + t), &grid, &spec).unwrap();
        assert!((eval_projected(&xi, 0.3).unwrap()[0] - 0.39).abs() < 1e-8);
        assert!((eval_projected(&xi, 0.5).unwrap()[0] - 0.75).abs() < 1e-8);
    }

    #[test]
    fn projection_is_idempotent() {
        let grid = make_grid(0.05, 0.95, 50).unwrap();
        let spec = cubic(6);
        let first = project(&sampled(&grid, |t| (6.0 * t).sin()), &grid, &spec).unwrap();
        let resampled = sampled(&grid, |t| first.eval(t).unwrap()[0]);
        let second = project(&resampled, &grid, &spec).unwrap();
        assert!((first.xi - second.xi).amax() < 1e-9);
    }

    #[test]
    fn square_system_interpolates() {
        let spec = cubic(5);
        let grid = make_grid(0.05, 0.95, spec.dimension()).unwrap();
        let values = sampled(&grid, |t| (3.0 * t).exp());
        let xi = project(&values, &grid, &spec).unwrap();
        for (k, &t) in grid.points().iter().enumerate() {
            assert!((xi.eval(t).unwrap()[0] - values[(k, 0)]).abs() < 1e-9);
        }
    }

    #[test]
    fn normal_equation_residual_is_small() {
        let grid = make_grid(0.05, 0.95, 65).unwrap();
        let spec = cubic(10);
        let projector = Projector::new(&grid, &spec).unwrap();
        let values = sampled(&grid, |t| (9.0 * t).cos() + t);
        let xi = projector.project(&values).unwrap();
        let b = &projector.basis_at_grid;
        let rhs = b.transpose() * &values;
        let resid = (b.transpose() * b) * &xi.xi - &rhs;
        assert!(resid.norm() <= 1e-10 * rhs.norm());
    }

    #[test]
    fn singular_gram_names_a_span() {
        // all grid points crowd into the last knot span
        let grid = QuantileGrid::from_points((0..20).map(|i| 0.9 + 0.002 * i as f64).collect()).unwrap();
        let err = Projector::new(&grid, &cubic(5)).unwrap_err();
        match err {
            Error::Numerical { message, .. } => assert!(message.contains("knot span"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
        let few = make_grid(0.05, 0.95, 3).unwrap();
        assert!(matches!(Projector::new(&few, &cubic(5)), Err(Error::Config(_))));
    }

    #[test]
    fn no_extrapolation() {
        let grid = make_grid(0.05, 0.95, 40).unwrap();
        let xi = project(&sampled(&grid, |t| t), &grid, &cubic(5)).unwrap();
        assert!(matches!(eval_projected(&xi, 0.01), Err(Error::Domain(_))));
        assert!(matches!(eval_projected(&xi, 0.96), Err(Error::Domain(_))));
    }

    #[test]
    fn json_round_trip_preserves_curve() {
        let grid = make_grid(0.05, 0.95, 40).unwrap();
        let xi = project(&sampled(&grid, |t| t * t), &grid, &cubic(5)).unwrap();
        let text = serde_json::to_string(&xi.to_json()).unwrap();
        let back = ProjectionMatrix::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, xi);
    }

    #[test]
    fn weights_decay_away_from_tau() {
        let grid = make_grid(0.05, 0.95, 257).unwrap();
        let spec = cubic(34);
        let span = 0.9 / 33.0;
        let projector = Projector::new(&grid, &spec).unwrap();
        for t in [0.06, 0.3, 0.5, 0.81] {
            let w = projector.weights(t).unwrap();
            for (k, &tk) in grid.points().iter().enumerate() {
                let spans = (tk - t).abs() / span;
                assert!(w[k].abs() <= 0.6f64.powf(spans), "tau={t} k={k}");
                if spans >= 20.0 {
                    assert!(w[k].abs() < 1e-6, "tau={t} k={k}");
                }
            }
        }
    }

    #[test]
    fn weight_norm_stays_bounded_as_k_grows() {
        let spec = SplineSpec::clamped_with_dimension(3, 0.05, 0.95, 8).unwrap();
        let norm = |k: usize| {
            let projector = Projector::new(&make_grid(0.05, 0.95, k).unwrap(), &spec).unwrap();
            (0..=900)
                .map(|i| {
                    let t = (0.05 + 0.001 * i as f64).min(0.95);
                    projector.weights(t).unwrap().iter().map(|a| a.abs()).sum::<f64>()
                })
                .fold(0.0, f64::max)
        };
        let bound = 1.5 * norm(64);
        assert!(norm(128) <= bound && norm(256) <= bound);
    }

    #[test]
    fn projection_is_linear() {
        let grid = make_grid(0.05, 0.95, 33).unwrap();
        let spec = cubic(6);
        let a = sampled(&grid, |t| (5.0 * t).sin());
        let b = sampled(&grid, |t| t.powi(5));
        let sum = project(&(&a + &b), &grid, &spec).unwrap().xi;
        let parts = project(&a, &grid, &spec).unwrap().xi + project(&b, &grid, &spec).unwrap().xi;
        assert!((sum - parts).amax() < 1e-12);
    }
}

