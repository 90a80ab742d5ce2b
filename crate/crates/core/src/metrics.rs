//! Held-out evaluation metrics.

use crate::error::{Error, Result};
use crate::likelihood::{OutputDistribution, Target};

/// Mean negative log predictive density (or probability, clamped at 1e-12).
pub fn nlpd(predictions: &[OutputDistribution], labels: &[Target]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (p, y) in predictions.iter().zip(labels) {
        total -= p.log_predictive(*y)?;
    }
    Ok(total / predictions.len() as f64)
}

/// Fraction of argmax hits. `None` for regression outputs.
pub fn accuracy(predictions: &[OutputDistribution], labels: &[Target]) -> Result<Option<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut hits = 0usize;
    for (p, y) in predictions.iter().zip(labels) {
        match (p.predicted_class(), y) {
            (Some(k), Target::Class(c)) => hits += usize::from(k == *c),
            _ => return Ok(None),
        }
    }
    Ok(Some(hits as f64 / predictions.len().max(1) as f64))
}
