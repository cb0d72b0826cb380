use std::path::PathBuf;

use dqrp_core::inference::{BandwidthRule, BootstrapKind};
use dqrp_core::sim::{CoverageConfig, Method};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Covariate transform applied to the raw columns of a data file.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Transform {
    /// Design row `(1, x)`.
    #[default]
    Identity,
    /// `sqrt(m) B(x)` for a single covariate; the range defaults to the data range.
    Spline {
        degree: usize,
        breakpoints: usize,
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
}

/// Fully resolved run configuration. Every field has a default, and the
/// resolved value is emitted with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub transform: Transform,
    /// Single quantile level; when absent the grid `tau_l, tau_u, k` is used.
    pub tau: Option<f64>,
    pub tau_l: f64,
    pub tau_u: f64,
    pub k: usize,
    pub degree: usize,
    pub breakpoints: usize,
    pub s: usize,
    pub seed: u64,
    pub bandwidth: BandwidthRule,
    /// Fixed bandwidth constant for every grid point; the normal-reference
    /// constant from the data design is used when absent.
    pub c_star: Option<f64>,
    /// Error scale entering the reference constant; estimated when absent.
    pub sigma: Option<f64>,
    pub ci: Vec<Method>,
    pub alpha: f64,
    pub boot_b: usize,
    pub boot_kind: BootstrapKind,
    pub n_int: usize,
    /// Raw covariate point; the covariate means when absent.
    pub x0: Option<Vec<f64>>,
    /// Response values at which to evaluate the conditional distribution.
    pub y: Vec<f64>,
    pub workers: Vec<String>,
    pub simulation: Option<CoverageConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            transform: Transform::Identity,
            tau: None,
            tau_l: 0.05,
            tau_u: 0.95,
            k: 65,
            degree: 3,
            breakpoints: 5,
            s: 1,
            seed: 0,
            bandwidth: BandwidthRule::Adjusted,
            c_star: None,
            sigma: None,
            ci: vec![Method::T],
            alpha: 0.05,
            boot_b: 500,
            boot_kind: BootstrapKind::Basic,
            n_int: 1000,
            x0: None,
            y: vec![],
            workers: vec![],
            simulation: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(0.0 < self.tau_l && self.tau_l < self.tau_u && self.tau_u < 1.0) {
            return bad(format!("need 0 < tau_l < tau_u < 1, got [{}, {}]", self.tau_l, self.tau_u));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("tau must lie in (0, 1), got {t}"));
            }
        }
        if self.k == 0 || self.s == 0 || self.n_int == 0 {
            return bad("K, S and n_int must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.ci.contains(&Method::Boot) && (self.boot_b as f64) < 2.0 / self.alpha {
            return bad(format!("bootstrap needs B >= 2/alpha, got {}", self.boot_b));
        }
        if let Some(c) = self.c_star {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("c_star must be positive, got {c}"));
            }
        }
        if let Some(sim) = &self.simulation {
            sim.validate()?;
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reproducibility header lines (without the comment marker).
    pub fn header(&self) -> Vec<String> {
        vec![
            format!("dqrp {}", env!("CARGO_PKG_VERSION")),
            format!("config_sha256 {}", self.hash()),
            format!("seed {}", self.seed),
        ]
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": self.hash(),
            "seed": self.seed,
        })
    }
}

/// Parses `naive`, `adjusted` or `fixed:<h>`.
pub fn parse_bandwidth(s: &str) -> Result<BandwidthRule, String> {
    match s {
        "naive" => Ok(BandwidthRule::Naive),
        "adjusted" => Ok(BandwidthRule::Adjusted),
        _ => s
            .strip_prefix("fixed:")
            .and_then(|h| h.parse::<f64>().ok())
            .filter(|h| *h > 0.0 && h.is_finite())
            .map(BandwidthRule::Fixed)
            .ok_or_else(|| format!("expected naive, adjusted or fixed:<h>, got {s:?}")),
    }
}

pub fn parse_method(s: &str) -> Result<Method, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown interval method {s:?} (oracle, normal, t, boot, sandwich)"))
}
