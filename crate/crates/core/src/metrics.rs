//! Coefficient and signal error metrics.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("baseline metric must be positive, got {0}")]
    ZeroBase(f64),
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// `sqrt(1/p Σ (est − truth)²)`.
pub fn rmse_theta(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(MetricError::LengthMismatch(est.len(), truth.len()));
    }
    if est.is_empty() {
        return Err(MetricError::Empty);
    }
    let ss: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / est.len() as f64).sqrt())
}

/// Mean over channels of the per-channel RMSE; traces are `channels × k`.
pub fn rmse_y(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(MetricError::ShapeMismatch(format!("{} vs {} channels", est.len(), truth.len())));
    }
    if est.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (c, (e, t)) in est.iter().zip(truth).enumerate() {
        if e.len() != t.len() || e.is_empty() {
            return Err(MetricError::ShapeMismatch(format!("channel {c}: {} vs {} samples", e.len(), t.len())));
        }
        let ss: f64 = e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        total += (ss / e.len() as f64).sqrt();
    }
    Ok(total / est.len() as f64)
}

/// `100 · (violated − base) / base`.
pub fn degradation_pct(violated: f64, base: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(MetricError::ZeroBase(base));
    }
    Ok(100.0 * (violated - base) / base)
}
