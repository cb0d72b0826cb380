//! Data files: header row, response in the first column, raw covariates after it.

use std::path::Path;

use dqrp_core::qr::DesignBlock;
use dqrp_core::spline::{eval_covariate_basis, SplineSpec};

use crate::config::Transform;
use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct RawData {
    pub y: Vec<f64>,
    /// Row-major raw covariates, `p` per observation.
    pub x: Vec<f64>,
    pub p: usize,
}

impl RawData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n()).map(move |i| self.x[i * self.p + j])
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.p).map(|j| self.column(j).sum::<f64>() / self.n() as f64).collect()
    }
}

pub fn read_csv(path: &Path) -> Result<RawData, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let p = reader
        .headers()?
        .len()
        .checked_sub(1)
        .ok_or_else(|| CliError::Config(format!("{}: header row is empty", path.display())))?;
    let (mut y, mut x) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != p + 1 {
            return Err(CliError::Config(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                line + 2,
                record.len(),
                p + 1
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Config(format!("{}: row {}: {field:?} is not a number", path.display(), line + 2))
            })?;
            if !v.is_finite() {
                return Err(CliError::Config(format!("{}: row {}: non-finite value", path.display(), line + 2)));
            }
            if j == 0 {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(CliError::Config(format!("{}: no observations", path.display())));
    }
    Ok(RawData { y, x, p })
}

/// Fills in the spline range from the data so the emitted config is self-contained.
pub fn resolve_transform(transform: &Transform, data: &RawData) -> Result<Transform, CliError> {
    match transform {
        Transform::Identity => Ok(Transform::Identity),
        Transform::Spline { degree, breakpoints, lo, hi } => {
            if data.p != 1 {
                return Err(CliError::Config(format!(
                    "the spline transform needs exactly one covariate, data has {}",
                    data.p
                )));
            }
            let lo = lo.unwrap_or_else(|| data.column(0).fold(f64::INFINITY, f64::min));
            let hi = hi.unwrap_or_else(|| data.column(0).fold(f64::NEG_INFINITY, f64::max));
            Ok(Transform::Spline {
                degree: *degree,
                breakpoints: *breakpoints,
                lo: Some(lo),
                hi: Some(hi),
            })
        }
    }
}

/// Maps raw covariates to design rows.
pub struct Designer {
    spline: Option<SplineSpec>,
    p: usize,
}

impl Designer {
    pub fn new(transform: &Transform, p: usize) -> Result<Self, CliError> {
        let spline = match transform {
            Transform::Identity => None,
            Transform::Spline { degree, breakpoints, lo, hi } => {
                let (lo, hi) = lo.zip(*hi).ok_or_else(|| CliError::Config("spline range unresolved".into()))?;
                Some(SplineSpec::new(*degree, lo, hi, *breakpoints, true)?)
            }
        };
        Ok(Self { spline, p })
    }

    pub fn m(&self) -> usize {
        self.spline.as_ref().map_or(self.p + 1, SplineSpec::dimension)
    }

    pub fn row(&self, x: &[f64]) -> Result<Vec<f64>, CliError> {
        if x.len() != self.p {
            return Err(CliError::Config(format!("covariate point has length {}, expected {}", x.len(), self.p)));
        }
        Ok(match &self.spline {
            None => std::iter::once(1.0).chain(x.iter().copied()).collect(),
            Some(spec) => eval_covariate_basis(spec, x[0], spec.dimension())?,
        })
    }

    pub fn block(&self, data: &RawData) -> Result<DesignBlock, CliError> {
        let m = self.m();
        let mut rows = Vec::with_capacity(data.n() * m);
        for i in 0..data.n() {
            rows.extend(self.row(&data.x[i * data.p..(i + 1) * data.p])?);
        }
        Ok(DesignBlock::from_row_major(data.n(), m, rows, data.y.clone())?)
    }
}
