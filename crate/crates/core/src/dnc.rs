//! Divide-and-conquer fitting: random partition, per-sub-sample quantile
//! regression over a grid (plus optional Powell variance components), and
//! pooling by plain averaging in ascending sub-sample order.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{bandwidth, BandwidthRule};
use crate::projection::QuantileGrid;
use crate::qr::{solve_qr_from, validate_tau, DesignBlock};

/// Random split of `0..N` into `S` blocks whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    permutation: Vec<usize>,
    /// Block `s` is `permutation[offsets[s]..offsets[s + 1]]`.
    offsets: Vec<usize>,
}

impl PartitionPlan {
    pub fn s(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        self.permutation.len()
    }

    pub fn block(&self, s: usize) -> &[usize] {
        &self.permutation[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Rejects plans with a block smaller than the number of regressors.
    pub fn check_min_size(&self, m: usize) -> Result<()> {
        match self.sizes().iter().min() {
            Some(&n) if n < m => Err(Error::Config(format!(
                "sub-sample size {n} is smaller than the number of regressors {m}"
            ))),
            _ => Ok(()),
        }
    }

    /// Materializes every block of `data`.
    pub fn split(&self, data: &DesignBlock) -> Result<Vec<DesignBlock>> {
        if data.n() != self.total() {
            return Err(Error::Config(format!(
                "plan covers {} rows, data has {}",
                self.total(),
                data.n()
            )));
        }
        (0..self.s()).map(|s| data.select(self.block(s))).collect()
    }
}

/// Uniformly random partition; the first `N mod S` blocks get one extra index.
pub fn partition(n: usize, s: usize, seed: u64) -> Result<PartitionPlan> {
    if s == 0 || s > n {
        return Err(Error::Config(format!("cannot split {n} observations into {s} sub-samples")));
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / s, n % s);
    let mut offsets = Vec::with_capacity(s + 1);
    offsets.push(0);
    for b in 0..s {
        offsets.push(offsets[b] + base + usize::from(b < extra));
    }
    Ok(PartitionPlan {
        permutation,
        offsets,
    })
}

/// How the Powell bandwidth is chosen at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSpec {
    pub rule: BandwidthRule,
    /// Constant `c*(tau_k)` per grid point (ignored by the fixed rule).
    pub constants: Vec<f64>,
    /// Pooled sample size `N` for the adjusted rule.
    pub total_n: usize,
}

impl VarianceSpec {
    pub fn bandwidth(&self, k: usize, n: usize) -> Result<f64> {
        let c = match self.rule {
            BandwidthRule::Fixed(_) => 0.0,
            _ => *self
                .constants
                .get(k)
                .ok_or_else(|| Error::Config(format!("no bandwidth constant for grid point {k}")))?,
        };
        bandwidth(self.rule, c, n, self.total_n)
    }
}

/// One sub-sample's estimates over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleSummary {
    pub s: usize,
    pub n: usize,
    pub grid: QuantileGrid,
    /// `K x m`; row `k` is the fit at `tau_k`.
    pub betas: DMatrix<f64>,
    pub j_powell: Option<Vec<DMatrix<f64>>>,
    /// `n^{-1} sum Z Z'`.
    pub gram: Option<DMatrix<f64>>,
}

impl SubsampleSummary {
    pub fn m(&self) -> usize {
        self.betas.ncols()
    }
}

/// Averages over sub-samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEstimate {
    pub grid: QuantileGrid,
    pub beta_bar: DMatrix<f64>,
    pub j_bar: Option<Vec<DMatrix<f64>>>,
    pub sigma1_bar: Option<DMatrix<f64>>,
    pub subsamples: usize,
}

/// Fits one block at every grid point, warm-starting each solve from the previous vertex.
pub fn fit_subsample(
    s: usize,
    block: &DesignBlock,
    grid: &QuantileGrid,
    variance: Option<&VarianceSpec>,
) -> Result<SubsampleSummary> {
    let (n, m, k) = (block.n(), block.m(), grid.len());
    let mut betas = DMatrix::zeros(k, m);
    let mut j_powell = variance.map(|_| Vec::with_capacity(k));
    let mut basis: Option<Vec<usize>> = None;
    for (idx, &tau) in grid.points().iter().enumerate() {
        let at = |e: Error| Error::AtGridPoint {
            subsample: s,
            grid_index: idx,
            source: Box::new(e),
        };
        let fit = solve_qr_from(block, tau, basis.as_deref()).map_err(at)?;
        for (j, v) in fit.coefficients.iter().enumerate() {
            betas[(idx, j)] = *v;
        }
        if let (Some(spec), Some(list)) = (variance, j_powell.as_mut()) {
            let h = spec.bandwidth(idx, n).map_err(at)?;
            list.push(powell_matrix(block, &fit.coefficients, h).map_err(at)?);
        }
        basis = Some(fit.basis);
    }
    Ok(SubsampleSummary {
        s,
        n,
        grid: grid.clone(),
        betas,
        j_powell,
        gram: variance.map(|_| block.gram()),
    })
}

/// Powell's estimator `(2nh)^{-1} sum_i Z_i Z_i' 1{|Y_i - Z_i'b| <= h}`.
pub fn powell_matrix(block: &DesignBlock, b: &[f64], h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
    }
    let m = block.m();
    if b.len() != m {
        return Err(Error::Config(format!("coefficient vector has length {}, expected {m}", b.len())));
    }
    let mut out = DMatrix::<f64>::zeros(m, m);
    for (i, r) in block.residuals(b).into_iter().enumerate() {
        if r.abs() <= h {
            let z = block.row(i);
            for j in 0..m {
                for l in j..m {
                    out[(j, l)] += z[j] * z[l];
                }
            }
        }
    }
    let scale = 1.0 / (2.0 * block.n() as f64 * h);
    for j in 0..m {
        for l in j..m {
            let v = out[(j, l)] * scale;
            out[(j, l)] = v;
            out[(l, j)] = v;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("Powell matrix is not finite"));
    }
    Ok(out)
}

/// Second-round Powell matrix evaluated at the broadcast pooled coefficients.
pub fn oracle_powell_round2(block: &DesignBlock, beta_bar_row: &[f64], h: f64) -> Result<DMatrix<f64>> {
    powell_matrix(block, beta_bar_row, h)
}

/// Entrywise means over sub-samples, accumulated in ascending `s`.
pub fn pool(summaries: &[SubsampleSummary]) -> Result<PooledEstimate> {
    let mut ordered: Vec<&SubsampleSummary> = summaries.iter().collect();
    ordered.sort_by_key(|x| x.s);
    let first = *ordered
        .first()
        .ok_or_else(|| Error::Config("nothing to pool".into()))?;
    let (k, m) = first.betas.shape();
    for x in &ordered {
        if x.grid != first.grid || x.betas.shape() != (k, m) {
            return Err(Error::Config(format!(
                "sub-sample {} has a different grid or dimension than sub-sample {}",
                x.s, first.s
            )));
        }
        if x.j_powell.is_some() != first.j_powell.is_some() || x.gram.is_some() != first.gram.is_some() {
            return Err(Error::Config(format!(
                "sub-sample {} disagrees on variance components",
                x.s
            )));
        }
    }
    let inv = 1.0 / ordered.len() as f64;
    let mut beta_bar = DMatrix::zeros(k, m);
    for x in &ordered {
        beta_bar += &x.betas;
    }
    beta_bar *= inv;

    let j_bar = first.j_powell.as_ref().map(|_| {
        (0..k)
            .map(|idx| {
                let mut acc = DMatrix::zeros(m, m);
                for x in &ordered {
                    acc += &x.j_powell.as_ref().expect("checked above")[idx];
                }
                acc * inv
            })
            .collect()
    });
    let sigma1_bar = first.gram.as_ref().map(|_| {
        let mut acc = DMatrix::zeros(m, m);
        for x in &ordered {
            acc += x.gram.as_ref().expect("checked above");
        }
        acc * inv
    });
    Ok(PooledEstimate {
        grid: first.grid.clone(),
        beta_bar,
        j_bar,
        sigma1_bar,
        subsamples: ordered.len(),
    })
}

/// Condition numbers above this are treated as singular.
const MAX_CONDITION: f64 = 1e12;

/// `tau(1-tau) J^{-1} Sigma1 J^{-1}` from the averaged matrices at grid index `k`.
pub fn pooled_sandwich(pooled: &PooledEstimate, k: usize) -> Result<DMatrix<f64>> {
    let tau = *pooled
        .grid
        .points()
        .get(k)
        .ok_or_else(|| Error::Config(format!("grid index {k} out of range")))?;
    let (Some(j_bar), Some(sigma1)) = (&pooled.j_bar, &pooled.sigma1_bar) else {
        return Err(Error::Config("pooled estimate carries no variance components".into()));
    };
    sandwich(&j_bar[k], sigma1, tau)
}

/// `tau(1-tau) J^{-1} Sigma1 J^{-1}` with a condition check on `J`.
pub fn sandwich(j: &DMatrix<f64>, sigma1: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    validate_tau(tau)?;
    let sv = j.singular_values();
    let (max, min) = (sv.max(), sv.min());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Numerical {
            message: "averaged Powell matrix is singular".into(),
            condition: Some(condition),
        });
    }
    let j_inv = j.clone().try_inverse().ok_or(Error::Numerical {
        message: "averaged Powell matrix is singular".into(),
        condition: Some(condition),
    })?;
    let mut out = (&j_inv * sigma1 * &j_inv) * (tau * (1.0 - tau));
    let sym = (&out + out.transpose()) * 0.5;
    out.copy_from(&sym);
    Ok(out)
}

/// One unit of work: fit sub-sample `s` at every grid point.
#[derive(Debug, Clone)]
pub struct Task {
    pub s: usize,
    pub block: DesignBlock,
    pub grid: QuantileGrid,
    pub variance: Option<VarianceSpec>,
}

/// Runs sub-sample tasks and returns summaries in ascending `s`.
pub trait Executor: Sync {
    fn run(&self, tasks: Vec<Task>) -> Result<Vec<SubsampleSummary>>;

    /// Second round: Powell matrices at the pooled coefficients, one list per task.
    fn round2(&self, tasks: &[Task], beta_bar: &DMatrix<f64>, bandwidths: &[f64]) -> Result<Vec<Vec<DMatrix<f64>>>> {
        tasks
            .iter()
            .map(|t| round2_local(&t.block, beta_bar, bandwidths))
            .collect()
    }

    /// Whether independent calls may run concurrently (false for shared connections).
    fn reentrant(&self) -> bool {
        true
    }
}

pub(crate) fn round2_local(block: &DesignBlock, beta_bar: &DMatrix<f64>, bandwidths: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    if bandwidths.len() != beta_bar.nrows() {
        return Err(Error::Config("one bandwidth per grid point is required".into()));
    }
    beta_bar
        .row_iter()
        .zip(bandwidths)
        .map(|(row, &h)| {
            let b: Vec<f64> = row.iter().copied().collect();
            oracle_powell_round2(block, &b, h)
        })
        .collect()
}

/// In-process executor; `parallel` fans tasks out over the current rayon pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct InProcess {
    pub parallel: bool,
}

impl Executor for InProcess {
    fn run(&self, tasks: Vec<Task>) -> Result<Vec<SubsampleSummary>> {
        let fit = |t: &Task| fit_subsample(t.s, &t.block, &t.grid, t.variance.as_ref());
        let mut out: Vec<SubsampleSummary> = if self.parallel {
            tasks.par_iter().map(fit).collect::<Result<_>>()?
        } else {
            tasks.iter().map(fit).collect::<Result<_>>()?
        };
        out.sort_by_key(|x| x.s);
        Ok(out)
    }
}

/// Builds one task per block of the plan.
pub fn make_tasks(
    data: &DesignBlock,
    plan: &PartitionPlan,
    grid: &QuantileGrid,
    variance: Option<&VarianceSpec>,
) -> Result<Vec<Task>> {
    plan.check_min_size(data.m())?;
    Ok(plan
        .split(data)?
        .into_iter()
        .enumerate()
        .map(|(s, block)| Task {
            s,
            block,
            grid: grid.clone(),
            variance: variance.cloned(),
        })
        .collect())
}

/// Partition, fit and pool in one call.
pub fn divide_and_conquer(
    executor: &dyn Executor,
    data: &DesignBlock,
    s: usize,
    seed: u64,
    grid: &QuantileGrid,
    variance: Option<&VarianceSpec>,
) -> Result<(Vec<SubsampleSummary>, PooledEstimate)> {
    let plan = partition(data.n(), s, seed)?;
    let summaries = executor.run(make_tasks(data, &plan, grid, variance)?)?;
    let pooled = pool(&summaries)?;
    Ok((summaries, pooled))
}
