use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use dqrp_core::cdf::{CdfEstimator, QuantileCurve};
use dqrp_core::dnc::{divide_and_conquer, Executor, InProcess, PooledEstimate, SubsampleSummary, VarianceSpec};
use dqrp_core::inference::{
    bootstrap_interval, bootstrap_replicate, ci_asymptotic, ci_normal, ci_t, draw_bootstrap_weights, kato_constant,
    subsample_covariance, CiMethod, ConfidenceInterval, KatoAccumulator,
};
use dqrp_core::projection::{make_grid, Projector, QuantileGrid};
use dqrp_core::qr::DesignBlock;
use dqrp_core::sim::{derive_seed, run_coverage, Method};
use dqrp_core::spline::SplineSpec;
use dqrp_core::wire::{serve, Remote};
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::data::{read_csv, resolve_transform, Designer};
use crate::error::CliError;

const STREAM_PARTITION: u64 = 11;
const STREAM_BOOT: u64 = 12;

/// Where a command writes its main artifact.
pub struct Output {
    pub path: Option<PathBuf>,
}

impl Output {
    fn write(&self, text: &str) -> Result<(), CliError> {
        match &self.path {
            Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
            None => {
                std::io::stdout().write_all(text.as_bytes())?;
                Ok(())
            }
        }
    }
}

fn commented_header(cfg: &RunConfig) -> String {
    cfg.header().iter().map(|l| format!("# {l}\n")).collect()
}

/// Data, design and covariate point after resolution.
pub struct Loaded {
    pub designer: Designer,
    pub block: DesignBlock,
}

/// Loads the data file and resolves data-dependent defaults into `cfg`.
pub fn load_data(cfg: &mut RunConfig, need_x0: bool) -> Result<Loaded, CliError> {
    let path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Config("no data file given (--data or \"data\" in the config)".into()))?;
    let raw = read_csv(&path)?;
    cfg.transform = resolve_transform(&cfg.transform, &raw)?;
    let designer = Designer::new(&cfg.transform, raw.p)?;
    if need_x0 && cfg.x0.is_none() {
        cfg.x0 = Some(raw.column_means());
    }
    let block = designer.block(&raw)?;
    if block.n() < cfg.s * block.m() {
        return Err(CliError::Config(format!(
            "{} observations cannot give S = {} sub-samples of at least m = {} rows",
            block.n(),
            cfg.s,
            block.m()
        )));
    }
    Ok(Loaded { designer, block })
}

pub fn executor(cfg: &RunConfig) -> Result<Box<dyn Executor>, CliError> {
    if cfg.workers.is_empty() {
        Ok(Box::new(InProcess { parallel: true }))
    } else {
        Ok(Box::new(Remote::connect(&cfg.workers)?))
    }
}

fn estimation_grid(cfg: &RunConfig) -> Result<QuantileGrid, CliError> {
    Ok(match cfg.tau {
        Some(t) => QuantileGrid::from_points(vec![t])?,
        None => make_grid(cfg.tau_l, cfg.tau_u, cfg.k)?,
    })
}

fn fit(
    cfg: &RunConfig,
    ex: &dyn Executor,
    block: &DesignBlock,
    grid: &QuantileGrid,
    variance: Option<&VarianceSpec>,
) -> Result<(Vec<SubsampleSummary>, PooledEstimate), CliError> {
    Ok(divide_and_conquer(
        ex,
        block,
        cfg.s,
        derive_seed(cfg.seed, &[STREAM_PARTITION]),
        grid,
        variance,
    )?)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Normal-reference error scale: scaled MAD of the pooled median-regression residuals.
fn estimate_sigma(cfg: &RunConfig, ex: &dyn Executor, block: &DesignBlock) -> Result<f64, CliError> {
    let grid = QuantileGrid::from_points(vec![0.5])?;
    let (_, pooled) = fit(cfg, ex, block, &grid, None)?;
    let beta: Vec<f64> = pooled.beta_bar.row(0).iter().copied().collect();
    let mut r = block.residuals(&beta);
    let med = median(&mut r);
    let mut dev: Vec<f64> = r.iter().map(|v| (v - med).abs()).collect();
    let sigma = 1.482_602_218_505_602 * median(&mut dev);
    if sigma > 0.0 && sigma.is_finite() {
        Ok(sigma)
    } else {
        Err(CliError::Config("residual scale is zero; pass --sigma or --c-star".into()))
    }
}

/// Resolves the bandwidth constant source and returns the per-grid-point variance spec.
fn variance_spec(
    cfg: &mut RunConfig,
    ex: &dyn Executor,
    block: &DesignBlock,
    grid: &QuantileGrid,
) -> Result<VarianceSpec, CliError> {
    let constants = match cfg.c_star {
        Some(c) => vec![c; grid.len()],
        None => {
            let sigma = match cfg.sigma {
                Some(s) => s,
                None => {
                    let s = estimate_sigma(cfg, ex, block)?;
                    cfg.sigma = Some(s);
                    s
                }
            };
            let mut acc = KatoAccumulator::new(block.m());
            for i in 0..block.n() {
                acc.push(block.row(i), 1.0, 1.0);
            }
            let moments = acc.finish()?;
            grid.points()
                .iter()
                .map(|&t| kato_constant(t, sigma, &moments))
                .collect::<dqrp_core::Result<_>>()?
        }
    };
    Ok(VarianceSpec {
        rule: cfg.bandwidth,
        constants,
        total_n: block.n(),
    })
}

fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn cmd_fit(cfg: &mut RunConfig, out: &Output, emit: &dyn Fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    let loaded = load_data(cfg, false)?;
    cfg.validate()?;
    emit(cfg)?;
    let ex = executor(cfg)?;
    let grid = estimation_grid(cfg)?;
    let (_, pooled) = fit(cfg, ex.as_ref(), &loaded.block, &grid, None)?;
    let m = loaded.block.m();
    let mut text = commented_header(cfg);
    text.push_str("tau");
    for j in 0..m {
        text.push_str(&format!(",b{j}"));
    }
    text.push('\n');
    for (k, &t) in grid.points().iter().enumerate() {
        text.push_str(&format!("{t},{}\n", fmt_row(pooled.beta_bar.row(k).iter().copied())));
    }
    out.write(&text)
}

fn projected(cfg: &RunConfig, ex: &dyn Executor, block: &DesignBlock) -> Result<dqrp_core::projection::ProjectionMatrix, CliError> {
    if cfg.tau.is_some() {
        return Err(CliError::Config("projection needs the quantile grid; drop --tau".into()));
    }
    let grid = make_grid(cfg.tau_l, cfg.tau_u, cfg.k)?;
    let spec = SplineSpec::new(cfg.degree, cfg.tau_l, cfg.tau_u, cfg.breakpoints, true)?;
    let projector = Projector::new(&grid, &spec)?;
    let (_, pooled) = fit(cfg, ex, block, &grid, None)?;
    Ok(projector.project(&pooled.beta_bar)?)
}

pub fn cmd_project(cfg: &mut RunConfig, out: &Output, emit: &dyn Fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    let loaded = load_data(cfg, false)?;
    cfg.validate()?;
    emit(cfg)?;
    let ex = executor(cfg)?;
    let xi = projected(cfg, ex.as_ref(), &loaded.block)?;
    let doc = serde_json::json!({ "meta": cfg.meta(), "projection": xi.to_json() });
    out.write(&(serde_json::to_string_pretty(&doc).expect("json") + "\n"))
}

pub fn cmd_cdf(cfg: &mut RunConfig, out: &Output, emit: &dyn Fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    let loaded = load_data(cfg, true)?;
    cfg.validate()?;
    if cfg.y.is_empty() {
        return Err(CliError::Config("no evaluation points given (--y)".into()));
    }
    emit(cfg)?;
    let ex = executor(cfg)?;
    let xi = projected(cfg, ex.as_ref(), &loaded.block)?;
    let z0 = loaded.designer.row(cfg.x0.as_deref().expect("resolved"))?;
    let curve = QuantileCurve::from_projection(&xi, &z0)?;
    let est = CdfEstimator::new(&curve, cfg.n_int)?;
    let mut text = commented_header(cfg);
    text.push_str("y,F\n");
    for &y in &cfg.y {
        text.push_str(&format!("{y},{}\n", est.eval(y)));
    }
    out.write(&text)
}

pub fn cmd_ci(cfg: &mut RunConfig, out: &Output, emit: &dyn Fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    let loaded = load_data(cfg, true)?;
    cfg.validate()?;
    if cfg.ci.contains(&Method::Oracle) {
        return Err(CliError::Config(
            "the oracle interval needs the true model; it is only available in simulate".into(),
        ));
    }
    if cfg.s < 2 && cfg.ci.iter().any(|m| matches!(m, Method::Normal | Method::T | Method::Boot)) {
        return Err(CliError::Config("normal, t and bootstrap intervals need S >= 2".into()));
    }
    let ex = executor(cfg)?;
    let grid = estimation_grid(cfg)?;
    let variance = if cfg.ci.contains(&Method::Sandwich) {
        Some(variance_spec(cfg, ex.as_ref(), &loaded.block, &grid)?)
    } else {
        None
    };
    emit(cfg)?;
    let (summaries, pooled) = fit(cfg, ex.as_ref(), &loaded.block, &grid, variance.as_ref())?;
    let z0 = loaded.designer.row(cfg.x0.as_deref().expect("resolved"))?;
    let boot: Option<Vec<DMatrix<f64>>> = if cfg.ci.contains(&Method::Boot) {
        let w = draw_bootstrap_weights(cfg.s, cfg.boot_b, derive_seed(cfg.seed, &[STREAM_BOOT]))?;
        Some((0..w.b()).map(|b| bootstrap_replicate(&summaries, &w.column(b))).collect::<dqrp_core::Result<_>>()?)
    } else {
        None
    };
    let value = |beta: &DMatrix<f64>, k: usize| -> f64 { beta.row(k).iter().zip(&z0).map(|(b, x)| b * x).sum() };
    let mut text = commented_header(cfg);
    text.push_str("tau,method,estimate,lower,upper,level,clamped\n");
    for (k, &t) in grid.points().iter().enumerate() {
        let center = value(&pooled.beta_bar, k);
        for &method in &cfg.ci {
            let ci: ConfidenceInterval = match method {
                Method::Normal => ci_normal(&pooled, &subsample_covariance(&summaries, k)?, &z0, k, cfg.alpha, cfg.s)?,
                Method::T => ci_t(&pooled, &subsample_covariance(&summaries, k)?, &z0, k, cfg.alpha, cfg.s)?,
                Method::Boot => {
                    let values: Vec<f64> = boot.as_ref().expect("drawn").iter().map(|b| value(b, k)).collect();
                    bootstrap_interval(center, &values, cfg.alpha, cfg.boot_kind)?
                }
                Method::Sandwich => {
                    let sigma = dqrp_core::dnc::pooled_sandwich(&pooled, k)?;
                    ci_asymptotic(center, &sigma, &z0, loaded.block.n(), cfg.alpha, CiMethod::Sandwich)?
                }
                Method::Oracle => unreachable!("rejected above"),
            };
            let name = serde_json::to_value(method).expect("enum");
            text.push_str(&format!(
                "{t},{},{center},{},{},{},{}\n",
                name.as_str().unwrap_or_default(),
                ci.lower,
                ci.upper,
                1.0 - cfg.alpha,
                ci.clamped
            ));
        }
    }
    out.write(&text)
}

pub fn cmd_simulate(cfg: &mut RunConfig, out: &Output, emit: &dyn Fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    cfg.validate()?;
    let sim = cfg
        .simulation
        .clone()
        .ok_or_else(|| CliError::Config("no \"simulation\" section in the config".into()))?;
    emit(cfg)?;
    let ex = executor(cfg)?;
    let report = run_coverage(&sim, ex.as_ref())?;
    let prefix = out.path.clone().unwrap_or_else(|| PathBuf::from("coverage"));
    let csv_path = with_suffix(&prefix, "csv");
    let json_path = with_suffix(&prefix, "json");
    let mut csv = commented_header(cfg);
    for msg in &report.failure_messages {
        csv.push_str(&format!("# failures {msg}\n"));
    }
    csv.push_str(&report.to_csv());
    std::fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    let doc = serde_json::json!({ "meta": cfg.meta(), "report": report });
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc).expect("json") + "\n")
        .map_err(|e| CliError::io(&json_path, e))?;
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Runs the configured job on remote workers and stops them afterwards.
pub fn cmd_coordinator(cfg: &mut RunConfig, out: &Output, emit: &dyn Fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    if cfg.workers.is_empty() {
        return Err(CliError::Config("coordinator mode needs worker endpoints (--connect)".into()));
    }
    let result = if cfg.simulation.is_some() {
        cmd_simulate(cfg, out, emit)
    } else {
        cmd_fit(cfg, out, emit)
    };
    // workers started with --once have already exited
    for w in &cfg.workers {
        if let Ok(remote) = Remote::connect(std::slice::from_ref(w)) {
            remote.shutdown()?;
        }
    }
    result
}

pub fn cmd_worker(listen: &str, once: bool) -> Result<(), CliError> {
    let listener = TcpListener::bind(listen).map_err(|e| CliError::Config(format!("cannot listen on {listen}: {e}")))?;
    eprintln!("worker listening on {}", listener.local_addr()?);
    Ok(serve(listener, once)?)
}
