//! Linear SE→RE calibration with a nonnegative slope, residuals, and the
//! `|ε| > k·σ` anomaly gate.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ANOMALY_K: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least 2 calibration points, got {0}")]
    InsufficientData(usize),
    #[error("calibration point {0} is not finite")]
    NonFinite(usize),
    #[error("threshold multiplier k must be positive and finite, got {0}")]
    InvalidK(f64),
    #[error("calibration file {path}: {message}")]
    File { path: String, message: String },
}

/// Where a calibration point was harvested from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSource {
    pub trajectory_id: String,
    pub session_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub se: f64,
    pub re: f64,
    pub source: Option<PointSource>,
}

impl CalibrationPoint {
    pub fn new(se: f64, re: f64) -> Self {
        Self {
            se,
            re,
            source: None,
        }
    }
}

/// Which points σ is estimated on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SigmaEstimate {
    /// σ from residuals on the fitting points themselves.
    #[default]
    SameSet,
    /// Every `every`-th point (1-based) is held out of the fit and used for σ.
    HoldOut { every: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub a: f64,
    pub b: f64,
    /// Population standard deviation of the residuals.
    pub sigma: f64,
    pub k: f64,
    pub n_fit: usize,
    /// All `se` values were identical; the model is the constant `mean(re)`.
    #[serde(default)]
    pub degenerate_design: bool,
    /// The unconstrained slope was negative and was clamped to zero.
    #[serde(default)]
    pub slope_clamped: bool,
}

impl CalibrationModel {
    /// A hand-specified model, mostly useful for tests and fixtures.
    pub fn new(a: f64, b: f64, sigma: f64, k: f64) -> Self {
        Self {
            a,
            b,
            sigma,
            k,
            n_fit: 0,
            degenerate_design: false,
            slope_clamped: false,
        }
    }

    pub fn with_k(&self, k: f64) -> Self {
        Self { k, ..self.clone() }
    }

    pub fn threshold(&self) -> f64 {
        self.k * self.sigma
    }

    pub fn predict(&self, se: f64) -> f64 {
        self.a * se + self.b
    }

    /// `re - predict(se)`. Positive: reasoning is more uncertain than the
    /// evidence warrants. Negative: reasoning is overconfident given
    /// ambiguous evidence.
    pub fn residual(&self, se: f64, re: f64) -> f64 {
        re - self.predict(se)
    }

    /// Strict inequality: `|ε| = τ` is not anomalous; with σ = 0 any nonzero ε is.
    pub fn is_anomaly(&self, epsilon: f64) -> bool {
        epsilon.abs() > self.threshold()
    }
}

fn validate(points: &[CalibrationPoint], k: f64) -> Result<(), CalibrationError> {
    if !(k.is_finite() && k > 0.0) {
        return Err(CalibrationError::InvalidK(k));
    }
    if points.len() < 2 {
        return Err(CalibrationError::InsufficientData(points.len()));
    }
    if let Some(i) = points
        .iter()
        .position(|p| !(p.se.is_finite() && p.re.is_finite()))
    {
        return Err(CalibrationError::NonFinite(i));
    }
    Ok(())
}

struct Line {
    a: f64,
    b: f64,
    degenerate: bool,
    clamped: bool,
}

/// Least squares for `re ≈ a·se + b` subject to `a ≥ 0`.
fn fit_line(points: &[CalibrationPoint]) -> Line {
    let n = points.len() as f64;
    let mean_se = points.iter().map(|p| p.se).sum::<f64>() / n;
    let mean_re = points.iter().map(|p| p.re).sum::<f64>() / n;
    let first_se = points[0].se;
    if points.iter().all(|p| p.se == first_se) {
        return Line {
            a: 0.0,
            b: mean_re,
            degenerate: true,
            clamped: false,
        };
    }
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in points {
        let dx = p.se - mean_se;
        sxx += dx * dx;
        sxy += dx * (p.re - mean_re);
    }
    let slope = sxy / sxx;
    if slope < 0.0 {
        // With a pinned at 0 the optimal intercept is the mean.
        Line {
            a: 0.0,
            b: mean_re,
            degenerate: false,
            clamped: true,
        }
    } else {
        Line {
            a: slope,
            b: mean_re - slope * mean_se,
            degenerate: false,
            clamped: false,
        }
    }
}

fn population_sd(points: &[CalibrationPoint], a: f64, b: f64) -> f64 {
    let n = points.len() as f64;
    let ss: f64 = points
        .iter()
        .map(|p| {
            let e = p.re - (a * p.se + b);
            e * e
        })
        .sum();
    (ss / n).sqrt()
}

pub fn fit(points: &[CalibrationPoint], k: f64) -> Result<CalibrationModel, CalibrationError> {
    fit_with(points, k, SigmaEstimate::SameSet)
}

pub fn fit_with(
    points: &[CalibrationPoint],
    k: f64,
    sigma_estimate: SigmaEstimate,
) -> Result<CalibrationModel, CalibrationError> {
    validate(points, k)?;
    let (fit_set, sigma_set): (Vec<CalibrationPoint>, Vec<CalibrationPoint>) = match sigma_estimate
    {
        SigmaEstimate::SameSet => (points.to_vec(), points.to_vec()),
        SigmaEstimate::HoldOut { every } => {
            let every = every.max(2);
            let (held, kept): (Vec<_>, Vec<_>) = points
                .iter()
                .enumerate()
                .partition(|(i, _)| (i + 1) % every == 0);
            let kept: Vec<_> = kept.into_iter().map(|(_, p)| p.clone()).collect();
            let held: Vec<_> = held.into_iter().map(|(_, p)| p.clone()).collect();
            if kept.len() < 2 || held.is_empty() {
                return Err(CalibrationError::InsufficientData(points.len()));
            }
            (kept, held)
        }
    };
    let line = fit_line(&fit_set);
    Ok(CalibrationModel {
        a: line.a,
        b: line.b,
        sigma: population_sd(&sigma_set, line.a, line.b),
        k,
        n_fit: fit_set.len(),
        degenerate_design: line.degenerate,
        slope_clamped: line.clamped,
    })
}

/// On-disk calibration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    #[serde(flatten)]
    pub model: CalibrationModel,
    /// Seconds since the Unix epoch.
    pub fitted_at: u64,
    #[serde(default)]
    pub source_log_paths: Vec<String>,
    #[serde(default)]
    pub sigma_estimate: SigmaEstimate,
}

impl CalibrationFile {
    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let text = serde_json::to_string_pretty(self).expect("calibration serializes");
        std::fs::write(path, text + "\n").map_err(|e| CalibrationError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let err = |message: String| CalibrationError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: CalibrationFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let m = &file.model;
        if !(m.a >= 0.0 && m.sigma >= 0.0 && m.k > 0.0 && m.b.is_finite()) {
            return Err(err(format!(
                "invalid parameters a={} b={} sigma={} k={}",
                m.a, m.b, m.sigma, m.k
            )));
        }
        Ok(file)
    }
}
