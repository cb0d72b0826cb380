mod commands;
mod config;
mod data;
mod error;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dqrp_core::inference::BandwidthRule;
use dqrp_core::sim::Method;

use commands::Output;
use config::{parse_bandwidth, parse_method, RunConfig, Transform};
use error::CliError;

/// Divide-and-conquer quantile regression with quantile projection and inference.
#[derive(Parser)]
#[command(name = "dqrp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pooled coefficients at one level or over the grid, as CSV.
    Fit(RunArgs),
    /// Spline projection matrix of the pooled coefficient paths, as JSON.
    Project(RunArgs),
    /// Conditional distribution function at `--y` for the point `--x0`.
    Cdf(RunArgs),
    /// Confidence intervals for x0'beta(tau), as CSV.
    Ci(RunArgs),
    /// Monte Carlo coverage experiment from the config's "simulation" section.
    Simulate(RunArgs),
    /// Runs the configured job on the workers given by `--connect`, then stops them.
    Coordinator(RunArgs),
    /// Serves sub-sample fits for a coordinator.
    Worker(WorkerArgs),
    /// Runs the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV with a header row, the response first and raw covariates after it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Covariate transform: identity or spline (single covariate).
    #[arg(long, value_parser = ["identity", "spline"])]
    transform: Option<String>,
    /// Degree of the covariate spline.
    #[arg(long = "x-degree")]
    x_degree: Option<usize>,
    /// Breakpoints of the covariate spline.
    #[arg(long = "x-breakpoints")]
    x_breakpoints: Option<usize>,
    /// Single quantile level; fit and ci use the grid when omitted.
    #[arg(long)]
    tau: Option<f64>,
    /// Lower end of the quantile range (not itself a grid point).
    #[arg(long = "tau-l")]
    tau_l: Option<f64>,
    /// Upper end of the quantile range.
    #[arg(long = "tau-u")]
    tau_u: Option<f64>,
    /// Number of grid points.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Spline degree of the projection.
    #[arg(long)]
    degree: Option<usize>,
    /// Number of equidistant spline breakpoints.
    #[arg(long)]
    breakpoints: Option<usize>,
    /// Number of sub-samples.
    #[arg(long = "S")]
    s: Option<usize>,
    /// Master seed for partitions and bootstrap weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Replications (simulate only).
    #[arg(long)]
    reps: Option<usize>,
    /// Intervals have level 1 - alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Bootstrap replicates.
    #[arg(long = "boot-B")]
    boot_b: Option<usize>,
    /// naive, adjusted or fixed:<h>.
    #[arg(long, value_parser = parse_bandwidth)]
    bandwidth: Option<BandwidthRule>,
    /// Fixed bandwidth constant; estimated from the data when omitted.
    #[arg(long = "c-star")]
    c_star: Option<f64>,
    /// Error scale for the bandwidth constant; robustly estimated when omitted.
    #[arg(long)]
    sigma: Option<f64>,
    /// Comma-separated interval methods: oracle, normal, t, boot, sandwich.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    ci: Option<Vec<Method>>,
    /// Integration points for the distribution function.
    #[arg(long = "n-int")]
    n_int: Option<usize>,
    /// Raw covariate point; defaults to the covariate means.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Comma-separated response values for cdf.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y: Option<Vec<f64>>,
    /// Comma-separated worker endpoints host:port.
    #[arg(long, value_delimiter = ',')]
    connect: Option<Vec<String>>,
    /// Worker threads for local computation.
    #[arg(long, env = "DQRP_THREADS")]
    threads: Option<usize>,
    /// Output file (output prefix for simulate).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the resolved configuration to this file.
    #[arg(long = "emit-config")]
    emit_config: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Exit after the first coordinator disconnects.
    #[arg(long)]
    once: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = &self.$flag {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        set!(data => data, tau => tau, tau_l => tau_l, tau_u => tau_u, k => k, degree => degree,
             breakpoints => breakpoints, s => s, seed => seed, alpha => alpha, boot_b => boot_b,
             bandwidth => bandwidth, c_star => c_star, sigma => sigma, ci => ci, n_int => n_int,
             x0 => x0, y => y, connect => workers);
        match (self.transform.as_deref(), &mut cfg.transform) {
            (Some("identity"), t) => *t = Transform::Identity,
            (Some(_), t) => {
                *t = Transform::Spline {
                    degree: self.x_degree.unwrap_or(3),
                    breakpoints: self.x_breakpoints.unwrap_or(5),
                    lo: None,
                    hi: None,
                }
            }
            (None, Transform::Spline { degree, breakpoints, .. }) => {
                *degree = self.x_degree.unwrap_or(*degree);
                *breakpoints = self.x_breakpoints.unwrap_or(*breakpoints);
            }
            (None, Transform::Identity) if self.x_degree.is_some() || self.x_breakpoints.is_some() => {
                return Err(CliError::Config("--x-degree/--x-breakpoints need --transform spline".into()));
            }
            _ => {}
        }
        match cfg.simulation.as_mut() {
            Some(sim) => {
                if let Some(v) = self.seed {
                    sim.seed = v;
                }
                if let Some(v) = self.reps {
                    sim.reps = v;
                }
                if let Some(v) = self.alpha {
                    sim.alpha = v;
                }
                if let Some(v) = self.boot_b {
                    sim.boot_b = v;
                }
                if let Some(v) = self.s {
                    sim.s_list = vec![v];
                }
                if let Some(v) = &self.ci {
                    sim.methods = v.clone();
                }
                if let Some(v) = self.bandwidth {
                    sim.bandwidth = v;
                }
                if let Some(v) = self.n_int {
                    sim.n_int = v;
                }
                if let Some(v) = self.tau {
                    sim.taus = vec![v];
                }
            }
            None if self.reps.is_some() => {
                return Err(CliError::Config("--reps applies only to a simulation config".into()));
            }
            None => {}
        }
        Ok(cfg)
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}"))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let args = match cli.command {
        Command::Worker(w) => return commands::cmd_worker(&w.listen, w.once),
        Command::Selftest => return selftest::run(),
        Command::Fit(ref a)
        | Command::Project(ref a)
        | Command::Cdf(ref a)
        | Command::Ci(ref a)
        | Command::Simulate(ref a)
        | Command::Coordinator(ref a) => a,
    };
    init_threads(args.threads)?;
    let mut cfg = args.resolve()?;
    let out = Output { path: args.out.clone() };
    let emit_path = args.emit_config.clone();
    let emit = move |cfg: &RunConfig| -> Result<(), CliError> {
        for line in cfg.header() {
            eprintln!("# {line}");
        }
        eprintln!("# config {}", cfg.canonical_json());
        if let Some(p) = &emit_path {
            let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
            std::fs::write(p, text).map_err(|e| CliError::io(p, e))?;
        }
        Ok(())
    };
    match cli.command {
        Command::Fit(_) => commands::cmd_fit(&mut cfg, &out, &emit),
        Command::Project(_) => commands::cmd_project(&mut cfg, &out, &emit),
        Command::Cdf(_) => commands::cmd_cdf(&mut cfg, &out, &emit),
        Command::Ci(_) => commands::cmd_ci(&mut cfg, &out, &emit),
        Command::Simulate(_) => commands::cmd_simulate(&mut cfg, &out, &emit),
        Command::Coordinator(_) => commands::cmd_coordinator(&mut cfg, &out, &emit),
        Command::Worker(_) | Command::Selftest => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
