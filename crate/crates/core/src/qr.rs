//! Exact linear quantile regression on a single block of data.
//!
//! The check-loss problem `min_b sum_i rho_tau(y_i - z_i'b)` is the linear
//! program `min tau*1'u + (1-tau)*1'v  s.t.  y - Zb = u - v, u, v >= 0`.
//! Its dual is `max y'a  s.t.  Z'a = (1-tau) Z'1, 0 <= a <= 1`, and every
//! set of `m` rows with a nonsingular sub-design is a dual-feasible basis
//! once the nonbasic `a_i` are put at the bound matching the sign of their
//! residual. The solver below is a bounded dual simplex over such bases,
//! with the long-step ratio test of the Barrodale-Roberts exchange method:
//! the leaving row is dropped from the interpolating set and the line search
//! along the resulting edge passes every breakpoint until the slope of the
//! objective turns nonnegative. Bland's rule takes over after a run of
//! degenerate (zero-length) steps.

use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const ZERO_RESIDUAL: f64 = 1e-12;
const DUAL_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;
const REFACTOR_EVERY: usize = 64;
const DEGENERATE_STEPS_BEFORE_BLAND: usize = 50;

/// Asymmetric absolute loss `(tau - 1{u <= 0}) * u`.
pub fn check_loss(u: f64, tau: f64) -> Result<f64> {
    validate_tau(tau)?;
    Ok(rho(u, tau))
}

#[inline]
pub(crate) fn rho(u: f64, tau: f64) -> f64 {
    if u <= 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

pub(crate) fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("quantile level {tau} outside (0, 1)")))
    }
}

/// Design rows `Z(X_i)` and responses `Y_i` for one block of data.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    n: usize,
    m: usize,
    /// Row-major `n x m`.
    rows: Vec<f64>,
    responses: Vec<f64>,
}

impl DesignBlock {
    /// Builds a block from row-major design entries.
    pub fn from_row_major(n: usize, m: usize, rows: Vec<f64>, responses: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Config(format!("empty design block ({n} x {m})")));
        }
        if rows.len() != n * m || responses.len() != n {
            return Err(Error::Config(format!(
                "design block shape mismatch: {} entries for {n} x {m}, {} responses",
                rows.len(),
                responses.len()
            )));
        }
        if rows.iter().chain(responses.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("design block contains non-finite entries".into()));
        }
        Ok(Self {
            n,
            m,
            rows,
            responses,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], responses: Vec<f64>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Config("ragged design rows".into()));
        }
        let flat = rows.iter().flatten().copied().collect();
        Self::from_row_major(rows.len(), m, flat, responses)
    }

    /// Intercept-only design (a single column of ones).
    pub fn intercept_only(responses: Vec<f64>) -> Result<Self> {
        let n = responses.len();
        Self::from_row_major(n, 1, vec![1.0; n], responses)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.m..(i + 1) * self.m]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn row_major(&self) -> &[f64] {
        &self.rows
    }

    /// Residuals `y_i - z_i'b`.
    pub fn residuals(&self, b: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.responses[i] - dot(self.row(i), b))
            .collect()
    }

    /// Check-loss objective at `b`.
    pub fn objective(&self, b: &[f64], tau: f64) -> f64 {
        self.residuals(b).into_iter().map(|r| rho(r, tau)).sum()
    }

    /// `n^{-1} sum_i z_i z_i'`.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.m;
        let mut g = DMatrix::zeros(m, m);
        for i in 0..self.n {
            let z = self.row(i);
            for j in 0..m {
                for k in j..m {
                    g[(j, k)] += z[j] * z[k];
                }
            }
        }
        let scale = 1.0 / self.n as f64;
        for j in 0..m {
            for k in j..m {
                let v = g[(j, k)] * scale;
                g[(j, k)] = v;
                g[(k, j)] = v;
            }
        }
        g
    }

    /// Sub-block made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(indices.len() * self.m);
        let mut responses = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::Config(format!("row index {i} out of range (n = {})", self.n)));
            }
            rows.extend_from_slice(self.row(i));
            responses.push(self.responses[i]);
        }
        Self::from_row_major(indices.len(), self.m, rows, responses)
    }

    /// Copy with responses multiplied by `c`.
    pub fn scale_responses(&self, c: f64) -> Result<Self> {
        let responses = self.responses.iter().map(|y| y * c).collect();
        Self::from_row_major(self.n, self.m, self.rows.clone(), responses)
    }
}

/// Result of a single quantile-regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFit {
    pub coefficients: Vec<f64>,
    pub tau: f64,
    pub objective: f64,
    /// Number of residuals with `|r| < 1e-12`.
    pub n_active: usize,
    /// Set when the design is rank deficient or the optimal vertex has more
    /// zero residuals than the rank, i.e. when the minimizer may not be unique.
    pub degenerate: bool,
    /// Rows interpolated by the terminal vertex; usable as a warm start.
    pub basis: Vec<usize>,
    /// Simplex pivots performed.
    pub iterations: usize,
}

/// Solves the quantile regression problem exactly.
pub fn solve_qr(block: &DesignBlock, tau: f64) -> Result<QuantileFit> {
    solve_qr_from(block, tau, None)
}

/// Like [`solve_qr`], starting from the interpolating rows of a previous fit
/// (typically the fit at a neighbouring quantile level). An unusable start is
/// ignored.
pub fn solve_qr_from(block: &DesignBlock, tau: f64, start: Option<&[usize]>) -> Result<QuantileFit> {
    validate_tau(tau)?;
    let columns = independent_columns(block);
    if columns.is_empty() {
        return Err(Error::Domain("design has no nonzero column".into()));
    }
    let rank = columns.len();
    let reduced;
    let work = if rank == block.m {
        block
    } else {
        let mut rows = Vec::with_capacity(block.n * rank);
        for i in 0..block.n {
            let z = block.row(i);
            rows.extend(columns.iter().map(|&j| z[j]));
        }
        reduced = DesignBlock::from_row_major(block.n, rank, rows, block.responses.clone())?;
        &reduced
    };

    let mut simplex = start
        .and_then(|s| Simplex::new(work, tau, s.to_vec()))
        .or_else(|| Simplex::new(work, tau, least_squares_start(work, tau)))
        .ok_or_else(|| Error::numerical("could not find a nonsingular starting basis"))?;
    simplex.run()?;

    let b_reduced = simplex.exact_coefficients()?;
    let mut coefficients = vec![0.0; block.m];
    for (&j, &v) in columns.iter().zip(&b_reduced) {
        coefficients[j] = v;
    }
    let residuals = block.residuals(&coefficients);
    let n_active = residuals.iter().filter(|r| r.abs() < ZERO_RESIDUAL).count();
    let objective = residuals.iter().map(|&r| rho(r, tau)).sum();
    Ok(QuantileFit {
        coefficients,
        tau,
        objective,
        n_active,
        degenerate: rank < block.m || n_active > rank,
        basis: simplex.basis,
        iterations: simplex.iterations,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy Gram-Schmidt over design columns; returns a maximal independent subset.
fn independent_columns(block: &DesignBlock) -> Vec<usize> {
    let (n, m) = (block.n, block.m);
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..m {
        let mut col: Vec<f64> = (0..n).map(|i| block.rows[i * m + j]).collect();
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for q in &ortho {
            let p = dot(q, &col);
            col.iter_mut().zip(q).for_each(|(c, qv)| *c -= p * qv);
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-10 * norm0 {
            col.iter_mut().for_each(|c| *c /= norm);
            ortho.push(col);
            keep.push(j);
        }
    }
    keep
}

/// Rows ordered by increasing absolute least-squares residual, filtered
/// down to `m` rows with linearly independent design vectors.
fn least_squares_start(block: &DesignBlock, tau: f64) -> Vec<usize> {
    let (n, m) = (block.n, block.m);
    let mut order: Vec<usize> = (0..n).collect();
    let mut xtx = DMatrix::<f64>::zeros(m, m);
    let mut xty = DVector::<f64>::zeros(m);
    for i in 0..n {
        let z = block.row(i);
        for j in 0..m {
            xty[j] += z[j] * block.responses[i];
            for k in 0..m {
                xtx[(j, k)] += z[j] * z[k];
            }
        }
    }
    if let Some(chol) = xtx.cholesky() {
        let b = chol.solve(&xty);
        let mut res = block.residuals(b.as_slice());
        // centre at the empirical tau-quantile of the residuals
        let mut sorted = res.clone();
        let rank = ((n as f64 * tau).ceil() as usize).clamp(1, n) - 1;
        let (_, shift, _) = sorted.select_nth_unstable_by(rank, f64::total_cmp);
        let shift = *shift;
        res.iter_mut().for_each(|r| *r -= shift);
        order.sort_by(|&a, &c| res[a].abs().total_cmp(&res[c].abs()).then(a.cmp(&c)));
    }
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut chosen = Vec::with_capacity(m);
    for i in order {
        let z = block.row(i);
        let norm0 = dot(z, z).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = z.to_vec();
        for q in &ortho {
            let p = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(x, qv)| *x -= p * qv);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            ortho.push(v);
            chosen.push(i);
            if chosen.len() == m {
                break;
            }
        }
    }
    chosen
}

/// Min-heap entry ordered by step length, then row index.
struct Breakpoint((f64, usize, f64));

impl PartialEq for Breakpoint {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Breakpoint {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let (a, b) = (&self.0, &other.0);
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1))
    }
}

struct Simplex<'a> {
    block: &'a DesignBlock,
    tau: f64,
    n: usize,
    m: usize,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    /// Nonbasic dual variable at its upper bound (residual on the positive side).
    upper: Vec<bool>,
    /// Inverse of the basic sub-design, row-major `m x m`.
    binv: Vec<f64>,
    /// `Z * binv`, row-major `n x m`.
    tableau: Vec<f64>,
    residuals: Vec<f64>,
    pivot_row: Vec<f64>,
    bland: bool,
    degenerate_steps: usize,
    since_refactor: usize,
    iterations: usize,
}

impl<'a> Simplex<'a> {
    fn new(block: &'a DesignBlock, tau: f64, basis: Vec<usize>) -> Option<Self> {
        let (n, m) = (block.n, block.m);
        if basis.len() != m || basis.iter().any(|&i| i >= n) {
            return None;
        }
        let mut in_basis = vec![false; n];
        for &i in &basis {
            if std::mem::replace(&mut in_basis[i], true) {
                return None;
            }
        }
        let mut s = Self {
            block,
            tau,
            n,
            m,
            basis,
            in_basis,
            upper: vec![false; n],
            binv: vec![0.0; m * m],
            tableau: vec![0.0; n * m],
            residuals: vec![0.0; n],
            pivot_row: Vec::with_capacity(m),
            bland: false,
            degenerate_steps: 0,
            since_refactor: 0,
            iterations: 0,
        };
        if !s.refactor() {
            return None;
        }
        for i in 0..n {
            s.upper[i] = s.residuals[i] > 0.0;
        }
        Some(s)
    }

    fn basic_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |r, c| self.block.row(self.basis[r])[c])
    }

    /// Recomputes the basis inverse, tableau and residuals from scratch.
    fn refactor(&mut self) -> bool {
        let m = self.m;
        let Some(inv) = self.basic_matrix().try_inverse() else {
            return false;
        };
        if inv.iter().any(|v| !v.is_finite()) {
            return false;
        }
        for r in 0..m {
            for c in 0..m {
                self.binv[r * m + c] = inv[(r, c)];
            }
        }
        for i in 0..self.n {
            let z = self.block.row(i);
            let t = &mut self.tableau[i * m..(i + 1) * m];
            t.fill(0.0);
            for (l, &zl) in z.iter().enumerate() {
                let brow = &self.binv[l * m..(l + 1) * m];
                t.iter_mut().zip(brow).for_each(|(tk, b)| *tk += zl * b);
            }
        }
        self.update_residuals();
        self.since_refactor = 0;
        true
    }

    fn coefficients(&self) -> Vec<f64> {
        let m = self.m;
        (0..m)
            .map(|l| {
                (0..m)
                    .map(|k| self.binv[l * m + k] * self.block.responses[self.basis[k]])
                    .sum()
            })
            .collect()
    }

    fn exact_coefficients(&self) -> Result<Vec<f64>> {
        let rhs = DVector::from_iterator(self.m, self.basis.iter().map(|&i| self.block.responses[i]));
        self.basic_matrix()
            .lu()
            .solve(&rhs)
            .map(|b| b.as_slice().to_vec())
            .ok_or_else(|| Error::numerical("terminal basis is singular"))
    }

    fn update_residuals(&mut self) {
        let b = self.coefficients();
        for i in 0..self.n {
            self.residuals[i] = if self.in_basis[i] {
                0.0
            } else {
                self.block.responses[i] - dot(self.block.row(i), &b)
            };
        }
    }

    /// Basic dual values `a_k`; optimality holds iff all lie in `[0, 1]`.
    fn basic_duals(&self) -> Vec<f64> {
        let m = self.m;
        let mut a = vec![1.0 - self.tau; m];
        for i in 0..self.n {
            if self.in_basis[i] {
                continue;
            }
            let w = if self.upper[i] { -self.tau } else { 1.0 - self.tau };
            let t = &self.tableau[i * m..(i + 1) * m];
            a.iter_mut().zip(t).for_each(|(ak, tk)| *ak += w * tk);
        }
        a
    }

    /// Picks the basic position to drop and the direction sign, if any row is infeasible.
    fn leaving(&self, duals: &[f64]) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (k, &a) in duals.iter().enumerate() {
            let (infeas, dir) = if a < -DUAL_TOL {
                (-a, 1.0)
            } else if a > 1.0 + DUAL_TOL {
                (a - 1.0, -1.0)
            } else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bk, _, binf)) => {
                    if self.bland {
                        self.basis[k] < self.basis[bk]
                    } else {
                        infeas > binf
                    }
                }
            };
            if better {
                best = Some((k, dir, infeas));
            }
        }
        best
    }

    /// Tie-breaking among optimal vertices: a basic dual sitting on a bound
    /// that would leave `[0, 1]` at level `tau - eps` marks a flat edge
    /// leading towards the left-limit solution `lim_{t -> tau-} b(t)`. For an
    /// intercept-only design this selects the order statistic `Y_(ceil(n tau))`.
    fn left_limit_move(&self, duals: &[f64]) -> Option<(usize, f64, f64)> {
        let m = self.m;
        let mut sums = vec![0.0; m];
        for i in 0..self.n {
            let t = &self.tableau[i * m..(i + 1) * m];
            sums.iter_mut().zip(t).for_each(|(s, tk)| *s += tk);
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for (k, (&a, &s)) in duals.iter().zip(&sums).enumerate() {
            // d a_k / d tau = -s_k
            let dir = if a.abs() <= DUAL_TOL && s < -DUAL_TOL {
                1.0
            } else if (a - 1.0).abs() <= DUAL_TOL && s > DUAL_TOL {
                -1.0
            } else {
                continue;
            };
            if best.is_none_or(|(bk, _, _)| self.basis[k] < self.basis[bk]) {
                best = Some((k, dir, 0.0));
            }
        }
        best
    }

    fn run(&mut self) -> Result<()> {
        let max_iter = 50 * (self.n + self.m) + 1000;
        let mut candidates: Vec<Breakpoint> = Vec::with_capacity(self.n);
        let mut final_checks = 0;
        let mut tie_moves = 0;
        let max_tie_moves = 10 * (self.n + self.m);
        for _ in 0..max_iter {
            let duals = self.basic_duals();
            let chosen = match self.leaving(&duals) {
                Some(c) => Some(c),
                None if self.since_refactor > 0 && final_checks < 3 => {
                    final_checks += 1;
                    if !self.refactor() {
                        return Err(Error::numerical("basis became singular"));
                    }
                    self.resign();
                    continue;
                }
                None if tie_moves < max_tie_moves => {
                    tie_moves += 1;
                    self.left_limit_move(&duals)
                }
                None => None,
            };
            let Some((k, dir, infeas)) = chosen else {
                return Ok(());
            };

            let m = self.m;
            candidates.clear();
            for i in 0..self.n {
                if self.in_basis[i] {
                    continue;
                }
                let c = dir * self.tableau[i * m + k];
                if c.abs() <= PIVOT_TOL {
                    continue;
                }
                let r = self.residuals[i];
                if self.upper[i] && c > 0.0 {
                    candidates.push(Breakpoint((r.max(0.0) / c, i, c)));
                } else if !self.upper[i] && c < 0.0 {
                    candidates.push(Breakpoint((r.min(0.0) / c, i, -c)));
                }
            }
            // breakpoints in (t, row) order; usually only a few are passed, so a heap beats a full sort
            let mut heap = BinaryHeap::from(std::mem::take(&mut candidates));
            let mut slope = -infeas;
            let mut entering = None;
            while let Some(Breakpoint((t, i, absc))) = heap.pop() {
                slope += absc;
                if slope >= -1e-13 * (1.0 + infeas) {
                    entering = Some((t, i));
                    break;
                }
                self.upper[i] = !self.upper[i];
            }
            candidates = heap.into_vec();
            let Some((step, enter)) = entering else {
                return Err(Error::numerical("objective unbounded along an edge"));
            };
            if step <= 1e-14 {
                self.degenerate_steps += 1;
                if self.degenerate_steps > DEGENERATE_STEPS_BEFORE_BLAND {
                    self.bland = true;
                }
            }

            let leave = self.basis[k];
            self.iterations += 1;
            self.pivot(enter, k);
            self.in_basis[leave] = false;
            self.in_basis[enter] = true;
            self.basis[k] = enter;
            self.upper[leave] = dir < 0.0;

            self.since_refactor += 1;
            if self.since_refactor >= REFACTOR_EVERY {
                if !self.refactor() {
                    return Err(Error::numerical("basis became singular"));
                }
            } else {
                self.update_residuals();
            }
            self.resign();
        }
        Err(Error::numerical("simplex iteration limit reached"))
    }

    /// Re-derives bound flags from residual signs where the sign is unambiguous.
    fn resign(&mut self) {
        for i in 0..self.n {
            if self.in_basis[i] {
                continue;
            }
            let r = self.residuals[i];
            if r > ZERO_RESIDUAL {
                self.upper[i] = true;
            } else if r < -ZERO_RESIDUAL {
                self.upper[i] = false;
            }
        }
    }

    /// Replaces basic position `k` by row `enter` (rank-one update).
    fn pivot(&mut self, enter: usize, k: usize) {
        let m = self.m;
        let mut prow = std::mem::take(&mut self.pivot_row);
        prow.clear();
        prow.extend_from_slice(&self.tableau[enter * m..(enter + 1) * m]);
        let p = prow[k];
        // zeroing the pivot entry keeps the row updates branch-free
        prow[k] = 0.0;
        let update = |row: &mut [f64]| {
            let pivot_col = row[k] / p;
            row.iter_mut().zip(&prow).for_each(|(x, &pl)| *x -= pl * pivot_col);
            row[k] = pivot_col;
        };
        self.binv.chunks_exact_mut(m).for_each(update);
        self.tableau.chunks_exact_mut(m).for_each(update);
        self.pivot_row = prow;
    }
}

/// Minimum objective over every basic solution (each nonsingular `m`-subset
/// of rows interpolated exactly). Exponential in `m`; an oracle for small problems.
pub fn exhaustive_objective(block: &DesignBlock, tau: f64) -> Result<f64> {
    validate_tau(tau)?;
    let (n, m) = (block.n(), block.m());
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        let a = DMatrix::from_fn(m, m, |r, c| block.row(idx[r])[c]);
        let rhs = DVector::from_iterator(m, idx.iter().map(|&i| block.responses()[i]));
        if a.determinant().abs() > 1e-10 {
            if let Some(b) = a.lu().solve(&rhs) {
                best = best.min(block.objective(b.as_slice(), tau));
            }
        }
        // advance to the next m-combination in lexicographic order
        let mut k = m;
        loop {
            if k == 0 {
                return if best.is_finite() {
                    Ok(best)
                } else {
                    Err(Error::numerical("design has no nonsingular m-subset"))
                };
            }
            k -= 1;
            if idx[k] < n - m + k {
                idx[k] += 1;
                for j in k + 1..m {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}
