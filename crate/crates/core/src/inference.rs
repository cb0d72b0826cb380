//! Confidence intervals from the spread of sub-sample estimates, the
//! weighted multiplier bootstrap, and bandwidth constants for the Powell
//! variance path.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{normal_pdf, normal_quantile, student_t_quantile};
use crate::dnc::{PooledEstimate, SubsampleSummary};
use crate::error::{Error, Result};
use crate::projection::ProjectionMatrix;
use crate::qr::validate_tau;

/// Two-point bootstrap weight law: `1 - 1/sqrt(2)` w.p. 2/3, `1 + sqrt(2)` w.p. 1/3.
pub const WEIGHT_LOW: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
pub const WEIGHT_HIGH: f64 = 1.0 + std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Oracle,
    Normal,
    T,
    Bootstrap,
    Sandwich,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    /// Nominal coverage `1 - alpha`.
    pub level: f64,
    pub method: CiMethod,
    /// Set when a slightly negative quadratic form was clamped to zero.
    pub clamped: bool,
}

impl ConfidenceInterval {
    pub fn symmetric(center: f64, half_width: f64, alpha: f64, method: CiMethod) -> Self {
        Self {
            lower: center - half_width,
            upper: center + half_width,
            level: 1.0 - alpha,
            method,
            clamped: false,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Sample covariance (divisor `S - 1`) of the sub-sample estimates at grid index `k`.
pub fn subsample_covariance(summaries: &[SubsampleSummary], k: usize) -> Result<DMatrix<f64>> {
    let s = summaries.len();
    if s < 2 {
        return Err(Error::Config(format!("sub-sample covariance needs S >= 2, got {s}")));
    }
    let mut ordered: Vec<&SubsampleSummary> = summaries.iter().collect();
    ordered.sort_by_key(|x| x.s);
    let m = ordered[0].m();
    if ordered.iter().any(|x| x.m() != m || k >= x.betas.nrows()) {
        return Err(Error::Config("sub-samples disagree on dimension or grid".into()));
    }
    let mut mean = vec![0.0; m];
    for x in &ordered {
        mean.iter_mut().zip(x.betas.row(k).iter()).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= s as f64);
    let mut cov = DMatrix::zeros(m, m);
    for x in &ordered {
        let d: Vec<f64> = x.betas.row(k).iter().zip(&mean).map(|(b, mu)| b - mu).collect();
        for i in 0..m {
            for j in i..m {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            let v = cov[(i, j)] / (s - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// `x0' A x0`, clamped at zero; the flag reports whether clamping happened.
pub fn quadratic_form(a: &DMatrix<f64>, x0: &[f64]) -> Result<(f64, bool)> {
    if a.nrows() != x0.len() || a.ncols() != x0.len() {
        return Err(Error::Config(format!(
            "x0 has length {}, matrix is {}x{}",
            x0.len(),
            a.nrows(),
            a.ncols()
        )));
    }
    let mut q = 0.0;
    for i in 0..x0.len() {
        for j in 0..x0.len() {
            q += x0[i] * a[(i, j)] * x0[j];
        }
    }
    if !q.is_finite() {
        return Err(Error::numerical("quadratic form is not finite"));
    }
    Ok(if q < 0.0 { (0.0, true) } else { (q, false) })
}

fn point_estimate(pooled: &PooledEstimate, x0: &[f64], k: usize) -> Result<f64> {
    if k >= pooled.beta_bar.nrows() || x0.len() != pooled.beta_bar.ncols() {
        return Err(Error::Config("grid index or x0 length does not match the pooled estimate".into()));
    }
    Ok(pooled.beta_bar.row(k).iter().zip(x0).map(|(b, x)| b * x).sum())
}

#[allow(clippy::too_many_arguments)]
fn spread_interval(
    pooled: &PooledEstimate,
    sigma_d: &DMatrix<f64>,
    x0: &[f64],
    k: usize,
    s: usize,
    alpha: f64,
    method: CiMethod,
    quantile: f64,
) -> Result<ConfidenceInterval> {
    let center = point_estimate(pooled, x0, k)?;
    let (q, clamped) = quadratic_form(sigma_d, x0)?;
    let half = (q / s as f64).sqrt() * quantile;
    let mut ci = ConfidenceInterval::symmetric(center, half, alpha, method);
    ci.clamped = clamped;
    Ok(ci)
}

/// `x0'beta_bar(tau_k) +- S^{-1/2} (x0' Sigma_D x0)^{1/2} Phi^{-1}(1 - alpha/2)`.
pub fn ci_normal(
    pooled: &PooledEstimate,
    sigma_d: &DMatrix<f64>,
    x0: &[f64],
    k: usize,
    alpha: f64,
    s: usize,
) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    if s < 2 {
        return Err(Error::Config(format!("normal interval needs S >= 2, got {s}")));
    }
    let z = if alpha == 1.0 { 0.0 } else { normal_quantile(1.0 - alpha / 2.0)? };
    spread_interval(pooled, sigma_d, x0, k, s, alpha, CiMethod::Normal, z)
}

/// As [`ci_normal`] with the `t_{S-1}` quantile.
pub fn ci_t(
    pooled: &PooledEstimate,
    sigma_d: &DMatrix<f64>,
    x0: &[f64],
    k: usize,
    alpha: f64,
    s: usize,
) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    if s < 2 {
        return Err(Error::Config(format!("t interval needs S >= 2, got {s}")));
    }
    let t = if alpha == 1.0 {
        0.0
    } else {
        student_t_quantile(1.0 - alpha / 2.0, (s - 1) as f64)?
    };
    spread_interval(pooled, sigma_d, x0, k, s, alpha, CiMethod::T, t)
}

/// `x0'beta_bar +- N^{-1/2} (x0' Sigma x0)^{1/2} Phi^{-1}(1 - alpha/2)` for an
/// asymptotic covariance `Sigma` (sandwich estimate or known oracle value).
pub fn ci_asymptotic(
    center: f64,
    sigma: &DMatrix<f64>,
    x0: &[f64],
    total_n: usize,
    alpha: f64,
    method: CiMethod,
) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    let (q, clamped) = quadratic_form(sigma, x0)?;
    let z = if alpha == 1.0 { 0.0 } else { normal_quantile(1.0 - alpha / 2.0)? };
    let mut ci = ConfidenceInterval::symmetric(center, (q / total_n as f64).sqrt() * z, alpha, method);
    ci.clamped = clamped;
    Ok(ci)
}

/// `S x B` matrix of i.i.d. two-point weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapWeights {
    pub omega: DMatrix<f64>,
}

impl BootstrapWeights {
    pub fn b(&self) -> usize {
        self.omega.ncols()
    }

    pub fn column(&self, b: usize) -> Vec<f64> {
        self.omega.column(b).iter().copied().collect()
    }

    pub fn column_mean(&self, b: usize) -> f64 {
        self.omega.column(b).mean()
    }
}

/// Draws the weights; column `b` comes from its own ChaCha stream so columns
/// can be generated independently and in any order.
pub fn draw_bootstrap_weights(s: usize, b: usize, seed: u64) -> Result<BootstrapWeights> {
    if s == 0 || b == 0 {
        return Err(Error::Config("bootstrap needs S >= 1 and B >= 1".into()));
    }
    let mut omega = DMatrix::zeros(s, b);
    for (col, mut column) in omega.column_iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(col as u64);
        for w in column.iter_mut() {
            *w = if rng.random_range(0..3u32) < 2 { WEIGHT_LOW } else { WEIGHT_HIGH };
        }
    }
    Ok(BootstrapWeights { omega })
}

/// `S^{-1} sum_s (omega_s / omega_bar) beta^s` for every grid row.
pub fn bootstrap_replicate(summaries: &[SubsampleSummary], omega: &[f64]) -> Result<DMatrix<f64>> {
    if summaries.is_empty() || summaries.len() != omega.len() {
        return Err(Error::Config(format!(
            "{} weights for {} sub-samples",
            omega.len(),
            summaries.len()
        )));
    }
    let mut ordered: Vec<&SubsampleSummary> = summaries.iter().collect();
    ordered.sort_by_key(|x| x.s);
    let shape = ordered[0].betas.shape();
    if ordered.iter().any(|x| x.betas.shape() != shape) {
        return Err(Error::Config("sub-samples disagree on grid or dimension".into()));
    }
    let s = omega.len() as f64;
    let mean = omega.iter().sum::<f64>() / s;
    if !(mean > 0.0) {
        return Err(Error::Domain("bootstrap weights must have a positive mean".into()));
    }
    let mut out = DMatrix::zeros(shape.0, shape.1);
    for (x, w) in ordered.iter().zip(omega) {
        out += &x.betas * (w / mean);
    }
    Ok(out / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapKind {
    /// Reflected interval around the base value.
    #[default]
    Basic,
    /// Raw quantiles of the replicate values.
    Percentile,
}

/// Empirical quantile: the order statistic of index `ceil(B p)` (1-based).
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let b = sorted.len();
    let idx = ((b as f64 * p - 1e-9).ceil() as usize).clamp(1, b);
    sorted[idx - 1]
}

/// Bootstrap interval from the functional at the base estimate and at each replicate.
pub fn bootstrap_interval(base: f64, replicates: &[f64], alpha: f64, kind: BootstrapKind) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    let b = replicates.len();
    if (b as f64) < 2.0 / alpha {
        return Err(Error::Config(format!(
            "bootstrap with alpha = {alpha} needs B >= {}, got {b}",
            (2.0 / alpha).ceil()
        )));
    }
    let mut centered: Vec<f64> = replicates.iter().map(|v| v - base).collect();
    if centered.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite bootstrap replicate"));
    }
    centered.sort_by(f64::total_cmp);
    let lo = empirical_quantile(&centered, alpha / 2.0);
    let hi = empirical_quantile(&centered, 1.0 - alpha / 2.0);
    let (lower, upper) = match kind {
        BootstrapKind::Basic => (base - hi, base - lo),
        BootstrapKind::Percentile => (base + lo, base + hi),
    };
    Ok(ConfidenceInterval {
        lower,
        upper,
        level: 1.0 - alpha,
        method: CiMethod::Bootstrap,
        clamped: false,
    })
}

/// Bootstrap interval for a functional of the projected quantile process.
pub fn bootstrap_ci<F>(
    functional: F,
    base: &ProjectionMatrix,
    replicates: &[ProjectionMatrix],
    alpha: f64,
    kind: BootstrapKind,
) -> Result<ConfidenceInterval>
where
    F: Fn(&ProjectionMatrix) -> Result<f64>,
{
    let base_value = functional(base)?;
    let values = replicates.iter().map(&functional).collect::<Result<Vec<_>>>()?;
    bootstrap_interval(base_value, &values, alpha, kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "h")]
pub enum BandwidthRule {
    /// `c* n^{-1/5}` with the sub-sample size.
    Naive,
    /// `c* N^{-1/5}` with the pooled size (undersmoothing).
    Adjusted,
    Fixed(f64),
}

pub fn bandwidth(rule: BandwidthRule, c_star: f64, n: usize, total_n: usize) -> Result<f64> {
    if n == 0 || total_n == 0 {
        return Err(Error::Config("bandwidth needs n, N >= 1".into()));
    }
    let h = match rule {
        BandwidthRule::Naive => c_star * (n as f64).powf(-0.2),
        BandwidthRule::Adjusted => c_star * (total_n as f64).powf(-0.2),
        BandwidthRule::Fixed(h) => h,
    };
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(Error::Config(format!("bandwidth must be positive, got {h}")))
    }
}

/// `alpha(tau) = (1 - Phi^{-1}(tau)^2)^2 phi(Phi^{-1}(tau))`.
pub fn kato_alpha(tau: f64) -> Result<f64> {
    validate_tau(tau)?;
    let z = normal_quantile(tau)?;
    Ok((1.0 - z * z).powi(2) * normal_pdf(z))
}

/// Design moments entering the bandwidth constant:
/// `num = sum_{j,k} E[w1 Z_j^2 Z_k^2]`, `den = sum_{j,k} (E[w3 Z_j Z_k])^2`,
/// with `w1 = w3 = 1` in the homoskedastic case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KatoMoments {
    pub num: f64,
    pub den: f64,
}

/// Streaming accumulator for [`KatoMoments`].
#[derive(Debug, Clone)]
pub struct KatoAccumulator {
    m: usize,
    count: usize,
    fourth: f64,
    second: DMatrix<f64>,
}

impl KatoAccumulator {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            count: 0,
            fourth: 0.0,
            second: DMatrix::zeros(m, m),
        }
    }

    /// Adds one draw `z` with weights `w1` (fourth moments) and `w3` (second moments).
    pub fn push(&mut self, z: &[f64], w1: f64, w3: f64) {
        debug_assert_eq!(z.len(), self.m);
        let sq: f64 = z.iter().map(|v| v * v).sum();
        // sum_{j,k} Z_j^2 Z_k^2 = (sum_j Z_j^2)^2
        self.fourth += w1 * sq * sq;
        for j in 0..self.m {
            for k in j..self.m {
                self.second[(j, k)] += w3 * z[j] * z[k];
            }
        }
        self.count += 1;
    }

    pub fn finish(&self) -> Result<KatoMoments> {
        if self.count == 0 {
            return Err(Error::Config("no draws for moment estimation".into()));
        }
        let c = self.count as f64;
        let mut den = 0.0;
        for j in 0..self.m {
            for k in 0..self.m {
                let v = if j <= k { self.second[(j, k)] } else { self.second[(k, j)] } / c;
                den += v * v;
            }
        }
        Ok(KatoMoments {
            num: self.fourth / c,
            den,
        })
    }
}

/// `c*(tau) = sigma (4.5 num / (alpha(tau) den))^{1/5}`.
pub fn kato_constant(tau: f64, sigma: f64, moments: &KatoMoments) -> Result<f64> {
    let a = kato_alpha(tau)?;
    if !(a > 0.0) {
        return Err(Error::Domain(format!("alpha({tau}) vanishes")));
    }
    if !(moments.den > 0.0 && moments.num > 0.0) {
        return Err(Error::numerical("degenerate design moments"));
    }
    Ok(sigma * (4.5 * moments.num / (a * moments.den)).powf(0.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{make_grid, project, QuantileGrid};
    use crate::spline::SplineSpec;

    fn summaries(values: &[&[f64]]) -> Vec<SubsampleSummary> {
        values
            .iter()
            .enumerate()
            .map(|(s, v)| SubsampleSummary {
                s,
                n: 10,
                grid: QuantileGrid::from_points(vec![0.5]).unwrap(),
                betas: DMatrix::from_row_slice(1, v.len(), v),
                j_powell: None,
                gram: None,
            })
            .collect()
    }

    fn pooled_of(sums: &[SubsampleSummary]) -> PooledEstimate {
        crate::dnc::pool(sums).unwrap()
    }

    #[test]
    fn covariance_examples() {
        let c = subsample_covariance(&summaries(&[&[0.0], &[2.0]]), 0).unwrap();
        assert_eq!(c[(0, 0)], 2.0);
        let same = subsample_covariance(&summaries(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]), 0).unwrap();
        assert_eq!(same, DMatrix::zeros(2, 2));
        assert!(subsample_covariance(&summaries(&[&[1.0]]), 0).is_err());
    }

    #[test]
    fn normal_and_t_examples() {
        let sums = summaries(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let pooled = pooled_of(&sums);
        let one = DMatrix::from_element(1, 1, 1.0);
        let ci = ci_normal(&pooled, &one, &[1.0], 0, 0.05, 4).unwrap();
        assert!((ci.half_width() - 0.5 * 1.959_963_984_540_054).abs() < 1e-9);
        assert!((ci.lower + ci.upper - 3.0).abs() < 1e-12);
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(ci_normal(&pooled, &zero, &[1.0], 0, 0.05, 4).unwrap().half_width(), 0.0);
        assert_eq!(ci_normal(&pooled, &one, &[1.0], 0, 1.0, 4).unwrap().half_width(), 0.0);
        let t2 = ci_t(&pooled, &one, &[1.0], 0, 0.05, 2).unwrap();
        assert!((t2.half_width() - 12.706_204_736_174_705 / 2f64.sqrt()).abs() < 1e-8);
        let neg = DMatrix::from_element(1, 1, -1e-18);
        assert!(ci_normal(&pooled, &neg, &[1.0], 0, 0.05, 4).unwrap().clamped);
    }

    #[test]
    fn t_is_wider_and_converges() {
        let sums = summaries(&[&[0.0], &[1.0]]);
        let pooled = pooled_of(&sums);
        let one = DMatrix::from_element(1, 1, 1.0);
        for s in 2..=30 {
            let n = ci_normal(&pooled, &one, &[1.0], 0, 0.05, s).unwrap();
            let t = ci_t(&pooled, &one, &[1.0], 0, 0.05, s).unwrap();
            assert!(t.half_width() > n.half_width());
        }
        let ratio = ci_t(&pooled, &one, &[1.0], 0, 0.05, 200).unwrap().half_width()
            / ci_normal(&pooled, &one, &[1.0], 0, 0.05, 200).unwrap().half_width();
        assert!(ratio <= 1.01 && ratio > 1.0);
    }

    #[test]
    fn intervals_are_location_equivariant() {
        let a = summaries(&[&[0.3, 1.0], &[0.5, 0.2], &[0.1, 0.8]]);
        let shift = [2.0, -1.0];
        let b: Vec<SubsampleSummary> = a
            .iter()
            .map(|x| {
                let mut y = x.clone();
                y.betas[(0, 0)] += shift[0];
                y.betas[(0, 1)] += shift[1];
                y
            })
            .collect();
        let x0 = [1.0, 0.7];
        let off = shift[0] * x0[0] + shift[1] * x0[1];
        let (ca, cb) = (subsample_covariance(&a, 0).unwrap(), subsample_covariance(&b, 0).unwrap());
        let ia = ci_t(&pooled_of(&a), &ca, &x0, 0, 0.1, 3).unwrap();
        let ib = ci_t(&pooled_of(&b), &cb, &x0, 0, 0.1, 3).unwrap();
        assert!((ib.lower - ia.lower - off).abs() < 1e-12);
        assert!((ib.half_width() - ia.half_width()).abs() < 1e-12);
    }

    #[test]
    fn weight_law() {
        assert!(((2.0 / 3.0) * WEIGHT_LOW + (1.0 / 3.0) * WEIGHT_HIGH - 1.0).abs() < 1e-15);
        let var = (2.0 / 3.0) * (WEIGHT_LOW - 1.0).powi(2) + (1.0 / 3.0) * (WEIGHT_HIGH - 1.0).powi(2);
        assert!((var - 1.0).abs() < 1e-15);
        let w = draw_bootstrap_weights(7, 50, 3).unwrap();
        assert!(w.omega.iter().all(|&v| v == WEIGHT_LOW || v == WEIGHT_HIGH));
        assert_eq!(w, draw_bootstrap_weights(7, 50, 3).unwrap());
        // columns are independent streams: a wider draw shares its leading columns
        let wide = draw_bootstrap_weights(7, 80, 3).unwrap();
        assert_eq!(wide.omega.columns(0, 50), w.omega.columns(0, 50));
    }

    #[test]
    fn replicate_examples() {
        let sums = summaries(&[&[0.0], &[2.0]]);
        let flat = bootstrap_replicate(&sums, &[WEIGHT_HIGH, WEIGHT_HIGH]).unwrap();
        assert_eq!(flat, pooled_of(&sums).beta_bar);
        let r = bootstrap_replicate(&sums, &[WEIGHT_LOW, WEIGHT_HIGH]).unwrap();
        let mean = 0.5 * (WEIGHT_LOW + WEIGHT_HIGH);
        assert!((r[(0, 0)] - WEIGHT_HIGH * 2.0 / (2.0 * mean)).abs() < 1e-15);
        let single = summaries(&[&[3.5]]);
        assert_eq!(bootstrap_replicate(&single, &[WEIGHT_LOW]).unwrap()[(0, 0)], 3.5);
    }

    #[test]
    fn order_statistics_and_interval_forms() {
        let sorted: Vec<f64> = (1..=500).map(f64::from).collect();
        assert_eq!(empirical_quantile(&sorted, 0.025), 13.0);
        assert_eq!(empirical_quantile(&sorted, 0.975), 488.0);
        let reps: Vec<f64> = (1..=500).map(|i| f64::from(i) - 250.0).collect();
        let basic = bootstrap_interval(0.0, &reps, 0.05, BootstrapKind::Basic).unwrap();
        assert_eq!((basic.lower, basic.upper), (-238.0, 237.0));
        let pct = bootstrap_interval(0.0, &reps, 0.05, BootstrapKind::Percentile).unwrap();
        assert_eq!((pct.lower, pct.upper), (-237.0, 238.0));
        assert!(bootstrap_interval(0.0, &reps[..39], 0.05, BootstrapKind::Basic).is_err());
        let flat = bootstrap_interval(1.5, &[1.5; 40], 0.05, BootstrapKind::Basic).unwrap();
        assert_eq!((flat.lower, flat.upper), (1.5, 1.5));
    }

    #[test]
    fn bootstrap_ci_on_projected_process() {
        let grid = make_grid(0.05, 0.95, 20).unwrap();
        let spec = SplineSpec::new(3, 0.05, 0.95, 4, true).unwrap();
        let curve = |c: f64| DMatrix::from_iterator(20, 1, grid.points().iter().map(|t| t + c));
        let base = project(&curve(0.0), &grid, &spec).unwrap();
        let reps: Vec<ProjectionMatrix> = (0..40)
            .map(|i| project(&curve(0.01 * (i as f64 - 19.5)), &grid, &spec).unwrap())
            .collect();
        let at = |x: &ProjectionMatrix| x.eval(0.5).map(|v| v[0]);
        let ci = bootstrap_ci(at, &base, &reps, 0.05, BootstrapKind::Basic).unwrap();
        assert!(ci.contains(0.5) && ci.lower < ci.upper);
        let same = vec![base.clone(); 40];
        let ci = bootstrap_ci(at, &base, &same, 0.05, BootstrapKind::Basic).unwrap();
        assert!((ci.upper - ci.lower).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_rules() {
        let h = bandwidth(BandwidthRule::Naive, 0.242, 512, 5120).unwrap();
        assert!((h - 0.242 * 512f64.powf(-0.2)).abs() < 1e-15);
        assert!(bandwidth(BandwidthRule::Adjusted, 0.242, 512, 5120).unwrap() <= h);
        assert_eq!(
            bandwidth(BandwidthRule::Adjusted, 0.242, 512, 512).unwrap(),
            bandwidth(BandwidthRule::Naive, 0.242, 512, 512).unwrap()
        );
        assert_eq!(bandwidth(BandwidthRule::Fixed(0.3), 0.0, 1, 1).unwrap(), 0.3);
        assert!(bandwidth(BandwidthRule::Fixed(0.0), 0.0, 1, 1).is_err());
        assert!(bandwidth(BandwidthRule::Naive, -1.0, 5, 5).is_err());
    }

    #[test]
    fn kato_alpha_and_symmetry() {
        assert!((kato_alpha(0.5).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-12);
        let mom = KatoMoments { num: 3.0, den: 2.0 };
        let (a, b) = (kato_constant(0.1, 0.1, &mom).unwrap(), kato_constant(0.9, 0.1, &mom).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kato_accumulator_on_fixed_points() {
        let mut acc = KatoAccumulator::new(2);
        acc.push(&[1.0, 0.0], 1.0, 1.0);
        acc.push(&[1.0, 2.0], 1.0, 1.0);
        let m = acc.finish().unwrap();
        // E[(Z1^2 + Z2^2)^2] = (1 + 25) / 2; E[ZZ'] = [[1, 1], [1, 2]]
        assert!((m.num - 13.0).abs() < 1e-15);
        assert!((m.den - 7.0).abs() < 1e-15);
    }
}
