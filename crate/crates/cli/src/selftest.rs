//! Fast invariant checks over the whole pipeline.

use std::net::TcpListener;

use dqrp_core::cdf::{CdfEstimator, QuantileCurve};
use dqrp_core::dnc::{divide_and_conquer, Executor, InProcess, VarianceSpec};
use dqrp_core::inference::{draw_bootstrap_weights, kato_constant, BandwidthRule, WEIGHT_HIGH, WEIGHT_LOW};
use dqrp_core::projection::{make_grid, Projector};
use dqrp_core::qr::{exhaustive_objective, solve_qr, DesignBlock};
use dqrp_core::sim::{gen_linear, kato_moments, ModelSpec};
use dqrp_core::spline::SplineSpec;
use dqrp_core::wire::{serve, Remote};
use nalgebra::DMatrix;

use crate::error::CliError;

type Check = fn() -> dqrp_core::Result<(bool, String)>;

/// Small deterministic generator so the checks need no RNG dependency here.
struct Lcg(u64);

impl Lcg {
    fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn solver() -> dqrp_core::Result<(bool, String)> {
    let mut g = Lcg(42);
    let mut worst: f64 = 0.0;
    for case in 0..60 {
        let m = 1 + case % 3;
        let n = m + 3 + case % 20;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| std::iter::once(1.0).chain((1..m).map(|_| 4.0 * g.uniform() - 2.0)).collect())
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() + (2.0 * g.uniform() - 1.0).powi(3)).collect();
        let tau = 0.05 + 0.9 * g.uniform();
        let block = DesignBlock::from_rows(&rows, y)?;
        worst = worst.max((solve_qr(&block, tau)?.objective - exhaustive_objective(&block, tau)?).abs());
    }
    Ok((worst <= 1e-8, format!("max objective gap {worst:.1e}")))
}

fn order_statistic() -> dqrp_core::Result<(bool, String)> {
    let mut g = Lcg(7);
    let y: Vec<f64> = (0..17).map(|_| g.uniform()).collect();
    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let block = DesignBlock::intercept_only(y)?;
    let mut ok = true;
    for i in 1..=9 {
        let tau = i as f64 / 10.0;
        let rank = (17.0 * tau - 1e-9).ceil() as usize;
        ok &= solve_qr(&block, tau)?.coefficients[0] == sorted[rank - 1];
    }
    Ok((ok, "n = 17, tau = 0.1..0.9".into()))
}

fn projection() -> dqrp_core::Result<(bool, String)> {
    let grid = make_grid(0.05, 0.95, 65)?;
    let proj = Projector::new(&grid, &SplineSpec::new(3, 0.05, 0.95, 5, true)?)?;
    let beta = DMatrix::from_fn(65, 1, |k, _| {
        let t = grid.points()[k];
        t * t + 0.5 * t
    });
    let xi = proj.project(&beta)?;
    let mut worst: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    for i in 0..200 {
        let t = 0.05 + 0.9 * i as f64 / 200.0;
        worst = worst.max((xi.eval(t)?[0] - (t * t + 0.5 * t)).abs());
        sum_err = sum_err.max((proj.weights(t)?.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((worst <= 1e-8 && sum_err <= 1e-10, format!("exactness {worst:.1e}, weight sum {sum_err:.1e}")))
}

fn bootstrap() -> dqrp_core::Result<(bool, String)> {
    let w = draw_bootstrap_weights(100, 1000, 3)?;
    let draws: Vec<f64> = (0..w.b()).flat_map(|b| w.column(b)).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let support = draws.iter().all(|&x| x == WEIGHT_LOW || x == WEIGHT_HIGH);
    let ok = support && (mean - 1.0).abs() < 4.0 / n.sqrt() && (var - 1.0).abs() < 4.0 * (1.5f64 / n).sqrt();
    Ok((ok, format!("mean {mean:.4}, var {var:.4}")))
}

fn cdf() -> dqrp_core::Result<(bool, String)> {
    let est = CdfEstimator::new(&QuantileCurve::new(0.05, 0.95, Ok)?, 1000)?;
    let worst = [0.01, 0.3, 0.5, 0.9, 0.99]
        .iter()
        .map(|&y: &f64| (est.eval(y) - y.clamp(0.05, 0.95)).abs())
        .fold(0.0, f64::max);
    Ok((worst <= 1e-3, format!("max error {worst:.1e}")))
}

fn bandwidth_constant() -> dqrp_core::Result<(bool, String)> {
    let mom = kato_moments(&ModelSpec::LinearHomo { m: 4, sigma: 0.1 }, 100_000, 1)?;
    let c = kato_constant(0.5, 0.1, &mom)?;
    Ok(((c - 0.173).abs() <= 0.01, format!("c*(0.5) = {c:.4}")))
}

fn loopback() -> dqrp_core::Result<(bool, String)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let worker = std::thread::spawn(move || serve(listener, false));
    let remote = Remote::connect(&[addr])?;
    let data = gen_linear(&ModelSpec::LinearHomo { m: 4, sigma: 0.1 }, 800, 5)?;
    let grid = make_grid(0.1, 0.9, 5)?;
    let variance = VarianceSpec {
        rule: BandwidthRule::Adjusted,
        constants: vec![0.2; 5],
        total_n: 800,
    };
    let run = |ex: &dyn Executor| divide_and_conquer(ex, &data.block, 4, 1, &grid, Some(&variance));
    let same = run(&InProcess::default())? == run(&remote)?;
    remote.shutdown()?;
    worker.join().map_err(|_| dqrp_core::Error::Protocol("worker thread panicked".into()))??;
    Ok((same, "in-process and loopback summaries".into()))
}

pub fn run() -> Result<(), CliError> {
    let checks: [(&str, Check); 7] = [
        ("solver", solver),
        ("order-statistic", order_statistic),
        ("projection", projection),
        ("bootstrap-weights", bootstrap),
        ("cdf", cdf),
        ("bandwidth-constant", bandwidth_constant),
        ("loopback", loopback),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::SelftestFailed(failed))
    }
}
