//! Simulation designs, their true quantile functions and oracle interval
//! widths, and the Monte Carlo coverage driver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdf::{CdfEstimator, QuantileCurve, DEFAULT_N_INT};
use crate::dist::{normal_cdf, normal_pdf, normal_quantile};
use crate::dnc::{make_tasks, partition, pool, Executor, PooledEstimate, SubsampleSummary, VarianceSpec};
use crate::error::{Error, Result};
use crate::inference::{
    bootstrap_interval, bootstrap_replicate, ci_asymptotic, ci_normal, ci_t, draw_bootstrap_weights,
    kato_constant, subsample_covariance, BandwidthRule, BootstrapKind, CiMethod, ConfidenceInterval,
    KatoAccumulator, KatoMoments,
};
use crate::projection::{make_grid, Projector, QuantileGrid};
use crate::qr::{validate_tau, DesignBlock};
use crate::spline::SplineSpec;

const BETA_3: [f64; 3] = [0.21, -0.89, 0.38];
const BETA_15_TAIL: [f64; 12] = [0.63, 0.11, 1.01, -1.79, -1.39, 0.52, -1.62, 1.26, -0.72, 0.43, -0.41, -0.02];
const Z_3: [f64; 3] = [0.69, 0.56, 0.35];
const INTERCEPT: f64 = 0.21;

/// Slope vector `beta_{m-1}` of the linear designs.
pub fn beta_vector(m: usize) -> Result<Vec<f64>> {
    let b15: Vec<f64> = BETA_3.iter().chain(&BETA_15_TAIL).copied().collect();
    match m {
        4 => Ok(BETA_3.to_vec()),
        16 => Ok(b15),
        32 => Ok(b15.iter().copied().chain([0.21]).chain(b15.iter().copied()).collect()),
        _ => Err(Error::Config(format!("no published coefficient vector for m = {m}"))),
    }
}

/// Scale vector `z_{m-1}` of the location-scale design.
pub fn z_vector(m: usize) -> Result<Vec<f64>> {
    match m {
        4 => Ok(Z_3.to_vec()),
        16 => Ok(Z_3.repeat(5)),
        // printed as (beta_15, beta_15, 0.69)
        32 => {
            let b15 = beta_vector(16)?;
            Ok(b15.iter().chain(&b15).copied().chain([0.69]).collect())
        }
        _ => Err(Error::Config(format!("no published scale vector for m = {m}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `Y = 0.21 + beta'X + sigma eps`.
    LinearHomo { m: usize, #[serde(default = "default_sigma")] sigma: f64 },
    /// `Y = 0.21 + beta'X + (1 + z'X) sigma eps`.
    LinearHetero { m: usize, #[serde(default = "default_sigma")] sigma: f64 },
    /// `Y = 2.5 + sin(2X) + 2 exp(-16 X^2) + sigma eps`, `X ~ U(-1, 1)`, cubic spline design of dimension `m`.
    Nonparam { m: usize, #[serde(default = "default_np_sigma")] sigma: f64 },
    /// `Y = a U^2 + b U` independent of `X`, `X` uniform over `sqrt(m) e_j`.
    Quadratic { a: f64, b: f64, m: usize },
}

fn default_sigma() -> f64 {
    0.1
}

fn default_np_sigma() -> f64 {
    0.7
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::LinearHomo { m, sigma } => {
                beta_vector(m)?;
                positive(sigma, "sigma")
            }
            ModelSpec::LinearHetero { m, sigma } => {
                beta_vector(m)?;
                z_vector(m)?;
                positive(sigma, "sigma")
            }
            ModelSpec::Nonparam { m, sigma } => {
                if m < 5 {
                    return Err(Error::Config(format!("spline design needs m >= 5, got {m}")));
                }
                positive(sigma, "sigma")
            }
            ModelSpec::Quadratic { a, b, m } => {
                if !(a >= 0.0 && b > 0.0 && m >= 1) {
                    return Err(Error::Config("quadratic model needs a >= 0, b > 0, m >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Number of regressors.
    pub fn m(&self) -> usize {
        match *self {
            ModelSpec::LinearHomo { m, .. }
            | ModelSpec::LinearHetero { m, .. }
            | ModelSpec::Nonparam { m, .. }
            | ModelSpec::Quadratic { m, .. } => m,
        }
    }

    /// Error scale entering the bandwidth constant.
    pub fn sigma(&self) -> f64 {
        match *self {
            ModelSpec::LinearHomo { sigma, .. }
            | ModelSpec::LinearHetero { sigma, .. }
            | ModelSpec::Nonparam { sigma, .. } => sigma,
            ModelSpec::Quadratic { .. } => 1.0,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelSpec::LinearHomo { m, .. } => format!("linear_homo_m{m}"),
            ModelSpec::LinearHetero { m, .. } => format!("linear_hetero_m{m}"),
            ModelSpec::Nonparam { m, .. } => format!("nonparam_m{m}"),
            ModelSpec::Quadratic { m, .. } => format!("quadratic_m{m}"),
        }
    }

    /// Covariate spline basis of the nonparametric design (`D = m - 2` breakpoints on `[-1, 1]`).
    pub fn covariate_spline(&self) -> Option<SplineSpec> {
        match *self {
            ModelSpec::Nonparam { m, .. } => Some(SplineSpec::new(3, -1.0, 1.0, m - 2, true).expect("validated m")),
            _ => None,
        }
    }

    /// Raw covariate of the default evaluation point.
    pub fn default_x0(&self) -> Vec<f64> {
        match *self {
            ModelSpec::LinearHomo { m, .. } | ModelSpec::LinearHetero { m, .. } => {
                vec![1.0 / ((m - 1) as f64).sqrt(); m - 1]
            }
            ModelSpec::Nonparam { .. } => vec![0.0],
            ModelSpec::Quadratic { m, .. } => {
                let mut v = vec![0.0; m];
                v[0] = (m as f64).sqrt();
                v
            }
        }
    }

    fn check_raw(&self, x: &[f64]) -> Result<()> {
        let (want, alt) = match *self {
            // linear models also take a full design vector, intercept entry first
            ModelSpec::LinearHomo { m, .. } | ModelSpec::LinearHetero { m, .. } => (m - 1, m),
            ModelSpec::Nonparam { .. } => (1, 1),
            ModelSpec::Quadratic { m, .. } => (m, m),
        };
        if x.len() != want && x.len() != alt {
            return Err(Error::Config(format!(
                "covariate point has length {}, model {} expects {want}",
                x.len(),
                self.name()
            )));
        }
        Ok(())
    }

    /// Design vector `Z(x)`. For linear models `x` is either the raw covariate
    /// (length `m - 1`, intercept prepended) or already a design vector (length `m`).
    pub fn design_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_raw(x)?;
        match self {
            ModelSpec::LinearHomo { m, .. } | ModelSpec::LinearHetero { m, .. } => Ok(if x.len() == *m {
                x.to_vec()
            } else {
                std::iter::once(1.0).chain(x.iter().copied()).collect()
            }),
            ModelSpec::Nonparam { m, .. } => {
                let spec = self.covariate_spline().expect("nonparametric design");
                crate::spline::eval_covariate_basis(&spec, x[0], *m)
            }
            ModelSpec::Quadratic { .. } => Ok(x.to_vec()),
        }
    }

    /// Scale factor `s(x)` with `Q(x; tau) = mu(x) + s(x) Phi^{-1}(tau)`; `None` for the quadratic model.
    /// Linear models take the design vector.
    fn scale(&self, z: &[f64]) -> Option<f64> {
        match self {
            ModelSpec::LinearHomo { sigma, .. } => Some(sigma * z[0]),
            ModelSpec::Nonparam { sigma, .. } => Some(*sigma),
            ModelSpec::LinearHetero { m, sigma } => {
                let zv = z_vector(*m).expect("validated");
                Some(sigma * (z[0] + dot(&zv, &z[1..])))
            }
            ModelSpec::Quadratic { .. } => None,
        }
    }

    /// Density of the error at its `tau`-quantile on the coefficient scale:
    /// `phi(Phi^{-1}(tau)) / sigma`, or `1 / Q'(tau)` for the quadratic model.
    fn coefficient_density(&self, tau: f64) -> Result<f64> {
        match *self {
            ModelSpec::Quadratic { a, b, .. } => Ok(1.0 / (2.0 * a * tau + b)),
            _ => Ok(normal_pdf(normal_quantile(tau)?) / self.sigma()),
        }
    }

    /// Conditional density of `Y` at its `tau`-quantile given `x`.
    pub fn density_at_quantile(&self, x: &[f64], tau: f64) -> Result<f64> {
        validate_tau(tau)?;
        self.check_raw(x)?;
        match *self {
            ModelSpec::Quadratic { a, b, .. } => Ok(1.0 / (2.0 * a * tau + b)),
            _ => {
                let z = match self {
                    ModelSpec::Nonparam { .. } => x.to_vec(),
                    _ => self.design_point(x)?,
                };
                let s = self.scale(&z).expect("location-scale model").abs();
                Ok(normal_pdf(normal_quantile(tau)?) / s)
            }
        }
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be positive, got {v}")))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nonparam_mean(x: f64) -> f64 {
    2.5 + (2.0 * x).sin() + 2.0 * (-16.0 * x * x).exp()
}

/// True conditional quantile `Q(x; tau)` at a raw covariate.
pub fn true_quantile(spec: &ModelSpec, x: &[f64], tau: f64) -> Result<f64> {
    validate_tau(tau)?;
    spec.check_raw(x)?;
    Ok(match spec {
        ModelSpec::LinearHomo { m, .. } | ModelSpec::LinearHetero { m, .. } => {
            let z = spec.design_point(x)?;
            INTERCEPT * z[0] + dot(&beta_vector(*m)?, &z[1..]) + spec.scale(&z).expect("linear") * normal_quantile(tau)?
        }
        ModelSpec::Nonparam { sigma, .. } => nonparam_mean(x[0]) + sigma * normal_quantile(tau)?,
        ModelSpec::Quadratic { a, b, .. } => a * tau * tau + b * tau,
    })
}

/// Correlation matrix of the Gaussian copula giving `U(0, 1)` marginals with
/// `Cov(X_j, X_k) = 0.01 * 0.7^|j-k|` off the diagonal. With Spearman
/// correlation `rho_s = 12 Cov`, the Gaussian correlation is `2 sin(pi rho_s / 6)`.
pub fn copula_correlation(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |j, k| {
        if j == k {
            1.0
        } else {
            let rho_s = 12.0 * 0.01 * 0.7f64.powi((j as i32 - k as i32).abs());
            2.0 * (std::f64::consts::PI * rho_s / 6.0).sin()
        }
    })
}

/// Correlated uniform covariates via the Gaussian copula.
#[derive(Debug, Clone)]
pub struct Copula {
    chol: DMatrix<f64>,
}

impl Copula {
    pub fn new(d: usize) -> Result<Self> {
        let chol = copula_correlation(d)
            .cholesky()
            .ok_or_else(|| Error::numerical("copula correlation is not positive definite"))?
            .l();
        Ok(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim();
        for v in scratch.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for (j, o) in out.iter_mut().enumerate().take(d) {
            let acc: f64 = scratch[..=j].iter().enumerate().map(|(k, z)| self.chol[(j, k)] * z).sum();
            *o = normal_cdf(acc);
        }
    }
}

/// Simulated data: raw covariates (row-major, `p` per observation) and the design block.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub raw: Vec<f64>,
    pub p: usize,
    pub block: DesignBlock,
}

impl DataSet {
    pub fn raw_row(&self, i: usize) -> &[f64] {
        &self.raw[i * self.p..(i + 1) * self.p]
    }
}

/// Draws `n` observations of any model from `rng`.
pub fn generate<R: Rng>(spec: &ModelSpec, n: usize, rng: &mut R) -> Result<DataSet> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("cannot generate an empty data set".into()));
    }
    let m = spec.m();
    let mut rows = Vec::with_capacity(n * m);
    let mut y = Vec::with_capacity(n);
    let (raw, p) = match spec {
        ModelSpec::LinearHomo { .. } | ModelSpec::LinearHetero { .. } => {
            let d = m - 1;
            let copula = Copula::new(d)?;
            let beta = beta_vector(m)?;
            let mut raw = vec![0.0; n * d];
            let mut scratch = vec![0.0; d];
            let mut z = vec![1.0; m];
            for i in 0..n {
                let x = &mut raw[i * d..(i + 1) * d];
                copula.draw(rng, x, &mut scratch);
                z[1..].copy_from_slice(x);
                let eps: f64 = rng.sample(StandardNormal);
                let scale = spec.scale(&z).expect("linear");
                y.push(INTERCEPT + dot(&beta, x) + scale * eps);
                rows.extend_from_slice(&z);
            }
            (raw, d)
        }
        ModelSpec::Nonparam { sigma, .. } => {
            let basis = spec.covariate_spline().expect("nonparametric design");
            let mut raw = Vec::with_capacity(n);
            for _ in 0..n {
                let x: f64 = rng.random_range(-1.0..1.0);
                let eps: f64 = rng.sample(StandardNormal);
                raw.push(x);
                y.push(nonparam_mean(x) + sigma * eps);
                rows.extend(crate::spline::eval_covariate_basis(&basis, x, m)?);
            }
            (raw, 1)
        }
        ModelSpec::Quadratic { a, b, .. } => {
            let root = (m as f64).sqrt();
            for _ in 0..n {
                let j = rng.random_range(0..m);
                let u: f64 = rng.random_range(0.0..1.0);
                y.push(a * u * u + b * u);
                rows.extend((0..m).map(|c| if c == j { root } else { 0.0 }));
            }
            (rows.clone(), m)
        }
    };
    Ok(DataSet {
        raw,
        p,
        block: DesignBlock::from_row_major(n, m, rows, y)?,
    })
}

pub fn gen_linear(spec: &ModelSpec, n: usize, seed: u64) -> Result<DataSet> {
    match spec {
        ModelSpec::LinearHomo { .. } | ModelSpec::LinearHetero { .. } => {
            generate(spec, n, &mut ChaCha8Rng::seed_from_u64(seed))
        }
        _ => Err(Error::Config("gen_linear needs a linear model".into())),
    }
}

pub fn gen_nonparam(n: usize, m: usize, seed: u64) -> Result<DataSet> {
    generate(&ModelSpec::Nonparam { m, sigma: 0.7 }, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn gen_quadratic(n: usize, a: f64, b: f64, m: usize, seed: u64) -> Result<DataSet> {
    generate(&ModelSpec::Quadratic { a, b, m }, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Four-point Gauss-Legendre rule on `[-1, 1]`.
const GL4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// Second-moment matrices needed by the oracle variances.
#[derive(Debug, Clone)]
pub struct OracleMoments {
    /// `E[Z Z']`.
    pub second: DMatrix<f64>,
    /// `E[Z Z' / |1 + z'X|]` for the location-scale model.
    pub weighted: Option<DMatrix<f64>>,
}

impl OracleMoments {
    /// Analytic or quadrature moments where available; Monte Carlo (`draws`, `seed`) otherwise.
    pub fn compute(spec: &ModelSpec, draws: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let m = spec.m();
        match spec {
            ModelSpec::LinearHomo { .. } => Ok(Self {
                second: linear_second_moment(m),
                weighted: None,
            }),
            ModelSpec::LinearHetero { .. } => {
                if draws == 0 {
                    return Err(Error::Config("Monte Carlo moments need draws >= 1".into()));
                }
                let z = z_vector(m)?;
                let copula = Copula::new(m - 1)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut x = vec![0.0; m - 1];
                let mut scratch = vec![0.0; m - 1];
                let mut acc = DMatrix::<f64>::zeros(m, m);
                let mut row = vec![1.0; m];
                for _ in 0..draws {
                    copula.draw(&mut rng, &mut x, &mut scratch);
                    row[1..].copy_from_slice(&x);
                    let w = 1.0 / (1.0 + dot(&z, &x)).abs();
                    for j in 0..m {
                        for k in j..m {
                            acc[(j, k)] += w * row[j] * row[k];
                        }
                    }
                }
                let weighted = DMatrix::from_fn(m, m, |j, k| acc[(j.min(k), j.max(k))] / draws as f64);
                Ok(Self {
                    second: linear_second_moment(m),
                    weighted: Some(weighted),
                })
            }
            ModelSpec::Nonparam { .. } => {
                let basis = spec.covariate_spline().expect("nonparametric design");
                let bp = basis.breakpoints().to_vec();
                let mut acc = DMatrix::zeros(m, m);
                for w in bp.windows(2) {
                    let (mid, half) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
                    for (node, weight) in GL4 {
                        let z = crate::spline::eval_covariate_basis(&basis, mid + half * node, m)?;
                        // density of U(-1, 1) is 1/2
                        let c = weight * half * 0.5;
                        for j in 0..m {
                            for k in 0..m {
                                acc[(j, k)] += c * z[j] * z[k];
                            }
                        }
                    }
                }
                Ok(Self {
                    second: acc,
                    weighted: None,
                })
            }
            ModelSpec::Quadratic { .. } => Ok(Self {
                second: DMatrix::identity(m, m),
                weighted: None,
            }),
        }
    }
}

/// `E[Z Z']` for `Z = (1, X)` with `U(0, 1)` marginals and the copula covariance.
pub fn linear_second_moment(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |j, k| match (j, k) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.5,
        _ if j == k => 1.0 / 3.0,
        _ => 0.25 + 0.01 * 0.7f64.powi((j as i32 - k as i32).abs()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// `Q(x0; tau)` estimated by `x0' beta_bar(tau)`.
    Coefficient,
    /// `F(Q(x0; tau) | x0) = tau` estimated through the projected process.
    Cdf,
}

fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    (v.transpose() * a * &v)[(0, 0)]
}

/// Asymptotic variance of `sqrt(N)` times the estimator of the target at `x0` (raw covariate).
pub fn oracle_variance(spec: &ModelSpec, moments: &OracleMoments, x0: &[f64], tau: f64, target: Target) -> Result<f64> {
    validate_tau(tau)?;
    let z0 = spec.design_point(x0)?;
    let tt = tau * (1.0 - tau);
    let inv = |a: &DMatrix<f64>| {
        a.clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::numerical("design moment matrix is singular"))
    };
    let coefficient = match (spec, &moments.weighted) {
        (ModelSpec::LinearHetero { sigma, .. }, Some(w)) => {
            // J = phi(q)/sigma E[ZZ'/|1+z'X|],  variance tau(1-tau) J^{-1} E[ZZ'] J^{-1}
            let phi = normal_pdf(normal_quantile(tau)?);
            let jinv = inv(w)? * (sigma / phi);
            tt * quad_form(&(&jinv * &moments.second * &jinv), &z0)
        }
        (ModelSpec::LinearHetero { .. }, None) => {
            return Err(Error::Config("location-scale model needs weighted moments".into()))
        }
        _ => {
            let f = spec.coefficient_density(tau)?;
            tt * quad_form(&inv(&moments.second)?, &z0) / (f * f)
        }
    };
    Ok(match target {
        Target::Coefficient => coefficient,
        // delta method: F(Q_hat) - tau ~ f(Q) (Q_hat - Q)
        Target::Cdf => {
            let f = spec.density_at_quantile(x0, tau)?;
            coefficient * f * f
        }
    })
}

/// Oracle half-width `N^{-1/2} sigma(tau) Phi^{-1}(1 - alpha/2)`.
pub fn oracle_halfwidth(
    spec: &ModelSpec,
    moments: &OracleMoments,
    x0: &[f64],
    tau: f64,
    alpha: f64,
    total_n: usize,
    target: Target,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) || total_n == 0 {
        return Err(Error::Config("oracle half-width needs 0 < alpha < 1 and N >= 1".into()));
    }
    let var = oracle_variance(spec, moments, x0, tau, target)?;
    Ok((var / total_n as f64).sqrt() * normal_quantile(1.0 - alpha / 2.0)?)
}

/// Design moments for the bandwidth constant, estimated from `draws` simulated design rows.
pub fn kato_moments(spec: &ModelSpec, draws: usize, seed: u64) -> Result<KatoMoments> {
    spec.validate()?;
    if draws == 0 {
        return Err(Error::Config("Monte Carlo moments need draws >= 1".into()));
    }
    let m = spec.m();
    let mut acc = KatoAccumulator::new(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        ModelSpec::LinearHomo { .. } | ModelSpec::LinearHetero { .. } => {
            let copula = Copula::new(m - 1)?;
            let z = match spec {
                ModelSpec::LinearHetero { .. } => Some(z_vector(m)?),
                _ => None,
            };
            let mut row = vec![1.0; m];
            let mut scratch = vec![0.0; m - 1];
            for _ in 0..draws {
                copula.draw(&mut rng, &mut row[1..], &mut scratch);
                let (w1, w3) = match &z {
                    Some(z) => {
                        let s = 1.0 + dot(z, &row[1..]);
                        (1.0 / s, 1.0 / (s * s * s))
                    }
                    None => (1.0, 1.0),
                };
                acc.push(&row, w1, w3);
            }
        }
        _ => {
            // design rows do not depend on the response here, so generate in chunks
            let mut left = draws;
            while left > 0 {
                let chunk = left.min(65_536);
                let data = generate(spec, chunk, &mut rng)?;
                for i in 0..chunk {
                    acc.push(data.block.row(i), 1.0, 1.0);
                }
                left -= chunk;
            }
        }
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oracle,
    Normal,
    T,
    Boot,
    Sandwich,
}

impl Method {
    pub fn ci_method(self) -> CiMethod {
        match self {
            Method::Oracle => CiMethod::Oracle,
            Method::Normal => CiMethod::Normal,
            Method::T => CiMethod::T,
            Method::Boot => CiMethod::Bootstrap,
            Method::Sandwich => CiMethod::Sandwich,
        }
    }

    fn needs_spread(self) -> bool {
        matches!(self, Method::Normal | Method::T | Method::Boot)
    }
}

/// Quantile grid and spline space used for the projected process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub tau_l: f64,
    pub tau_u: f64,
    pub k: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Number of equidistant breakpoints `D`.
    pub breakpoints: usize,
}

fn default_degree() -> usize {
    3
}

impl GridConfig {
    pub fn grid(&self) -> Result<QuantileGrid> {
        make_grid(self.tau_l, self.tau_u, self.k)
    }

    pub fn spline(&self) -> Result<SplineSpec> {
        SplineSpec::new(self.degree, self.tau_l, self.tau_u, self.breakpoints, true)
    }
}

/// Everything that determines a coverage experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub model: ModelSpec,
    /// Sub-sample size; the pooled sample has `n * S` observations.
    pub n: usize,
    pub s_list: Vec<usize>,
    pub taus: Vec<f64>,
    #[serde(default = "default_target")]
    pub target: Target,
    pub methods: Vec<Method>,
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    /// Raw covariate point; the model default when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_boot_b")]
    pub boot_b: usize,
    #[serde(default)]
    pub boot_kind: BootstrapKind,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: BandwidthRule,
    /// Use second-round Powell matrices evaluated at the pooled coefficients.
    #[serde(default)]
    pub two_round: bool,
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "default_n_int")]
    pub n_int: usize,
}

fn default_target() -> Target {
    Target::Coefficient
}
fn default_alpha() -> f64 {
    0.05
}
fn default_boot_b() -> usize {
    500
}
fn default_bandwidth() -> BandwidthRule {
    BandwidthRule::Adjusted
}
fn default_mc_draws() -> usize {
    1_000_000
}
fn default_n_int() -> usize {
    DEFAULT_N_INT
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = self.model.m();
        if self.reps == 0 || self.s_list.is_empty() || self.taus.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("reps, s_list, taus and methods must be nonempty".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        for &tau in &self.taus {
            validate_tau(tau)?;
        }
        for &s in &self.s_list {
            if s == 0 || self.n < m {
                return Err(Error::Config(format!(
                    "sub-sample size {} is smaller than the number of regressors {m} (S = {s})",
                    self.n
                )));
            }
        }
        if self.methods.contains(&Method::Boot) && (self.boot_b as f64) < 2.0 / self.alpha {
            return Err(Error::Config(format!("bootstrap needs B >= 2/alpha, got {}", self.boot_b)));
        }
        if let Some(x0) = &self.x0 {
            self.model.design_point(x0)?;
        }
        match self.target {
            Target::Coefficient => {
                let mut sorted = self.taus.clone();
                sorted.sort_by(f64::total_cmp);
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Config("duplicate quantile levels".into()));
                }
            }
            Target::Cdf => {
                let g = self
                    .grid
                    .as_ref()
                    .ok_or_else(|| Error::Config("the cdf target needs a grid configuration".into()))?;
                Projector::new(&g.grid()?, &g.spline()?)?;
                if self.taus.iter().any(|&t| t < g.tau_l || t > g.tau_u) {
                    return Err(Error::Config("target levels must lie inside [tau_l, tau_u]".into()));
                }
                if let Some(bad) = self.methods.iter().find(|m| !matches!(m, Method::Oracle | Method::Boot)) {
                    return Err(Error::Config(format!("method {bad:?} is not available for the cdf target")));
                }
                if self.n_int == 0 {
                    return Err(Error::Config("n_int must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn x0(&self) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| self.model.default_x0())
    }
}

/// One row of the coverage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub model: String,
    pub n: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub tau: f64,
    pub method: Method,
    /// Replications that produced an interval.
    #[serde(rename = "R")]
    pub r: usize,
    pub cover: usize,
    pub prop: f64,
    pub se: f64,
    /// Replications whose estimation failed; excluded from `R`.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub cells: Vec<CoverageCell>,
    /// First failure message per cell with failures, for diagnosis.
    pub failure_messages: Vec<String>,
}

impl CoverageReport {
    pub fn cell(&self, s: usize, tau: f64, method: Method) -> Option<&CoverageCell> {
        self.cells.iter().find(|c| c.s == s && c.tau == tau && c.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,n,S,tau,method,R,cover,prop,se\n");
        for c in &self.cells {
            let method = serde_json::to_value(c.method).expect("enum").as_str().unwrap_or_default().to_string();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.model, c.n, c.s, c.tau, method, c.r, c.cover, c.prop, c.se
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Deterministic 64-bit seed derivation (SplitMix64 finalizer over the parts).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(x: u64) -> u64 {
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)))
}

const STREAM_DATA: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_BOOT: u64 = 3;
const STREAM_MOMENTS: u64 = 4;

/// Quantities shared by all replications.
struct Prepared {
    x0: Vec<f64>,
    z0: Vec<f64>,
    grid: QuantileGrid,
    projector: Option<Projector>,
    /// Grid index of each target level (coefficient target).
    tau_index: Vec<usize>,
    /// `sqrt(oracle variance)` per target level.
    oracle_sd: Vec<f64>,
    /// Bandwidth constant per grid point, when the sandwich is requested.
    constants: Option<Vec<f64>>,
    z_crit: f64,
}

fn prepare(config: &CoverageConfig) -> Result<Prepared> {
    config.validate()?;
    let x0 = config.x0();
    let z0 = config.model.design_point(&x0)?;
    let (grid, projector) = match config.target {
        Target::Coefficient => {
            let mut pts = config.taus.clone();
            pts.sort_by(f64::total_cmp);
            (QuantileGrid::from_points(pts)?, None)
        }
        Target::Cdf => {
            let g = config.grid.as_ref().expect("validated");
            let grid = g.grid()?;
            let projector = Projector::new(&grid, &g.spline()?)?;
            (grid, Some(projector))
        }
    };
    let tau_index = config
        .taus
        .iter()
        .map(|t| grid.points().iter().position(|p| p == t).unwrap_or(usize::MAX))
        .collect();
    let oracle_sd = if config.methods.contains(&Method::Oracle) {
        let moments = OracleMoments::compute(
            &config.model,
            config.mc_draws,
            derive_seed(config.seed, &[STREAM_MOMENTS, 0]),
        )?;
        config
            .taus
            .iter()
            .map(|&t| oracle_variance(&config.model, &moments, &x0, t, config.target).map(f64::sqrt))
            .collect::<Result<_>>()?
    } else {
        vec![]
    };
    let constants = if config.methods.contains(&Method::Sandwich) {
        let moments = kato_moments(
            &config.model,
            config.mc_draws,
            derive_seed(config.seed, &[STREAM_MOMENTS, 1]),
        )?;
        Some(
            grid.points()
                .iter()
                .map(|&t| kato_constant(t, config.model.sigma(), &moments))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    Ok(Prepared {
        x0,
        z0,
        grid,
        projector,
        tau_index,
        oracle_sd,
        constants,
        z_crit: normal_quantile(1.0 - config.alpha / 2.0)?,
    })
}

/// Cover indicator (or failure message) per (tau, method) for one (replication, S).
type CellOutcomes = Vec<std::result::Result<bool, String>>;

/// Methods that produce a cell for a given `S`; spread-based intervals need `S >= 2`.
fn methods_for(config: &CoverageConfig, s: usize) -> Vec<Method> {
    config
        .methods
        .iter()
        .copied()
        .filter(|m| s >= 2 || !m.needs_spread())
        .collect()
}

fn linear_value(beta: &DMatrix<f64>, k: usize, z0: &[f64]) -> f64 {
    beta.row(k).iter().zip(z0).map(|(b, x)| b * x).sum()
}

fn replicate_once(
    config: &CoverageConfig,
    prep: &Prepared,
    executor: &dyn Executor,
    rep: usize,
    s: usize,
) -> Result<Vec<Result<ConfidenceInterval>>> {
    let methods = methods_for(config, s);
    let total_n = config.n * s;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_DATA, s as u64, rep as u64]));
    let data = generate(&config.model, total_n, &mut rng)?;
    let plan = partition(total_n, s, derive_seed(config.seed, &[STREAM_PARTITION, s as u64, rep as u64]))?;
    let variance = prep.constants.as_ref().map(|c| VarianceSpec {
        rule: config.bandwidth,
        constants: c.clone(),
        total_n,
    });
    let tasks = make_tasks(&data.block, &plan, &prep.grid, variance.as_ref())?;
    let summaries = executor.run(tasks.clone())?;
    let mut pooled = pool(&summaries)?;
    if config.two_round {
        if let Some(spec) = &variance {
            let h = (0..prep.grid.len())
                .map(|k| spec.bandwidth(k, config.n))
                .collect::<Result<Vec<_>>>()?;
            let round2 = executor.round2(&tasks, &pooled.beta_bar, &h)?;
            pooled.j_bar = Some(average_round2(&round2, pooled.beta_bar.ncols())?);
        }
    }
    let boot = if methods.contains(&Method::Boot) {
        Some(draw_bootstrap_weights(
            s,
            config.boot_b,
            derive_seed(config.seed, &[STREAM_BOOT, s as u64, rep as u64]),
        )?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(config.taus.len() * methods.len());
    match config.target {
        Target::Coefficient => {
            let boot_reps: Option<Vec<DMatrix<f64>>> = boot
                .as_ref()
                .map(|w| (0..w.b()).map(|b| bootstrap_replicate(&summaries, &w.column(b))).collect())
                .transpose()?;
            for (ti, &tau) in config.taus.iter().enumerate() {
                let k = prep.tau_index[ti];
                let center = linear_value(&pooled.beta_bar, k, &prep.z0);
                for &method in &methods {
                    out.push(coefficient_interval(
                        config, prep, &summaries, &pooled, boot_reps.as_deref(), method, ti, k, tau, center, total_n, s,
                    ));
                }
            }
        }
        Target::Cdf => {
            let projector = prep.projector.as_ref().expect("cdf target");
            let xi = projector.project(&pooled.beta_bar)?;
            let base = CdfEstimator::new(&QuantileCurve::from_projection(&xi, &prep.z0)?, config.n_int)?;
            let boot_cdfs: Option<Vec<CdfEstimator>> = boot
                .as_ref()
                .map(|w| {
                    (0..w.b())
                        .map(|b| {
                            let rep_xi = projector.project(&bootstrap_replicate(&summaries, &w.column(b))?)?;
                            let curve = QuantileCurve::from_projection(&rep_xi, &prep.z0)?;
                            CdfEstimator::new(&curve, config.n_int)
                        })
                        .collect()
                })
                .transpose()?;
            for (ti, &tau) in config.taus.iter().enumerate() {
                let y = true_quantile(&config.model, &prep.x0, tau)?;
                let f_hat = base.eval(y);
                for &method in &methods {
                    out.push(match method {
                        Method::Oracle => Ok(ConfidenceInterval::symmetric(
                            f_hat,
                            prep.oracle_sd[ti] / (total_n as f64).sqrt() * prep.z_crit,
                            config.alpha,
                            CiMethod::Oracle,
                        )),
                        Method::Boot => {
                            let values: Vec<f64> =
                                boot_cdfs.as_ref().expect("drawn").iter().map(|c| c.eval(y)).collect();
                            bootstrap_interval(f_hat, &values, config.alpha, config.boot_kind)
                        }
                        other => Err(Error::Config(format!("{other:?} unavailable for the cdf target"))),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn coefficient_interval(
    config: &CoverageConfig,
    prep: &Prepared,
    summaries: &[SubsampleSummary],
    pooled: &PooledEstimate,
    boot_reps: Option<&[DMatrix<f64>]>,
    method: Method,
    ti: usize,
    k: usize,
    _tau: f64,
    center: f64,
    total_n: usize,
    s: usize,
) -> Result<ConfidenceInterval> {
    match method {
        Method::Oracle => Ok(ConfidenceInterval::symmetric(
            center,
            prep.oracle_sd[ti] / (total_n as f64).sqrt() * prep.z_crit,
            config.alpha,
            CiMethod::Oracle,
        )),
        Method::Normal => ci_normal(pooled, &subsample_covariance(summaries, k)?, &prep.z0, k, config.alpha, s),
        Method::T => ci_t(pooled, &subsample_covariance(summaries, k)?, &prep.z0, k, config.alpha, s),
        Method::Boot => {
            let values: Vec<f64> = boot_reps
                .expect("drawn")
                .iter()
                .map(|b| linear_value(b, k, &prep.z0))
                .collect();
            bootstrap_interval(center, &values, config.alpha, config.boot_kind)
        }
        Method::Sandwich => {
            let sigma = crate::dnc::pooled_sandwich(pooled, k)?;
            ci_asymptotic(center, &sigma, &prep.z0, total_n, config.alpha, CiMethod::Sandwich)
        }
    }
}

fn average_round2(round2: &[Vec<DMatrix<f64>>], m: usize) -> Result<Vec<DMatrix<f64>>> {
    let k = round2.first().map_or(0, Vec::len);
    if round2.iter().any(|r| r.len() != k) {
        return Err(Error::Protocol("second-round replies disagree on grid size".into()));
    }
    let inv = 1.0 / round2.len() as f64;
    Ok((0..k)
        .map(|idx| {
            let mut acc = DMatrix::zeros(m, m);
            for r in round2 {
                acc += &r[idx];
            }
            acc * inv
        })
        .collect())
}

/// Runs the coverage experiment. Replications run in parallel on the current
/// rayon pool when the executor allows it; results are aggregated in
/// ascending replication order, so the report does not depend on scheduling.
pub fn run_coverage(config: &CoverageConfig, executor: &dyn Executor) -> Result<CoverageReport> {
    let prep = prepare(config)?;
    let one = |rep: usize| -> Vec<CellOutcomes> {
        config
            .s_list
            .iter()
            .map(|&s| {
                let width = config.taus.len() * methods_for(config, s).len();
                match replicate_once(config, &prep, executor, rep, s) {
                    Ok(cis) => cis
                        .into_iter()
                        .enumerate()
                        .map(|(i, ci)| {
                            let tau = config.taus[i / (width / config.taus.len()).max(1)];
                            ci.map_err(|e| e.to_string()).and_then(|ci| truth(config, &prep, tau).map(|t| ci.contains(t)))
                        })
                        .collect(),
                    Err(e) => vec![Err(e.to_string()); width],
                }
            })
            .collect()
    };
    let outcomes: Vec<Vec<CellOutcomes>> = if executor.reentrant() {
        (0..config.reps).into_par_iter().map(one).collect()
    } else {
        (0..config.reps).map(one).collect()
    };

    let mut cells = Vec::new();
    let mut failure_messages = Vec::new();
    for (si, &s) in config.s_list.iter().enumerate() {
        let methods = methods_for(config, s);
        for (ti, &tau) in config.taus.iter().enumerate() {
            for (mi, &method) in methods.iter().enumerate() {
                let idx = ti * methods.len() + mi;
                let (mut r, mut cover, mut failures) = (0, 0, 0);
                let mut first_failure = None;
                for rep in &outcomes {
                    match &rep[si][idx] {
                        Ok(c) => {
                            r += 1;
                            cover += usize::from(*c);
                        }
                        Err(msg) => {
                            failures += 1;
                            first_failure.get_or_insert_with(|| msg.clone());
                        }
                    }
                }
                if let Some(msg) = first_failure {
                    failure_messages.push(format!("S={s} tau={tau} {method:?}: {failures} failures, first: {msg}"));
                }
                let prop = if r > 0 { cover as f64 / r as f64 } else { 0.0 };
                cells.push(CoverageCell {
                    model: config.model.name(),
                    n: config.n,
                    s,
                    tau,
                    method,
                    r,
                    cover,
                    prop,
                    se: if r > 0 { (prop * (1.0 - prop) / r as f64).sqrt() } else { 0.0 },
                    failures,
                });
            }
        }
    }
    Ok(CoverageReport {
        cells,
        failure_messages,
    })
}

fn truth(config: &CoverageConfig, prep: &Prepared, tau: f64) -> std::result::Result<f64, String> {
    match config.target {
        Target::Coefficient => true_quantile(&config.model, &prep.x0, tau).map_err(|e| e.to_string()),
        Target::Cdf => Ok(tau),
    }
}
