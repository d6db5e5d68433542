//! Nonconformity scores and prediction-set construction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A calibrated score cutoff. `Infinite` is the explicit sentinel returned
/// when the calibration mass cannot reach `1 - alpha`; it admits every label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    pub fn admits(self, score: f64) -> bool {
        match self {
            Threshold::Finite(q) => score <= q,
            Threshold::Infinite => true,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Threshold::Finite(q) => Some(q),
            Threshold::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Threshold::Infinite)
    }

    /// Total order with `Infinite` above every finite value.
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Threshold::Finite(a), Threshold::Finite(b)) => a.total_cmp(b),
            (Threshold::Finite(_), Threshold::Infinite) => Ordering::Less,
            (Threshold::Infinite, Threshold::Finite(_)) => Ordering::Greater,
            (Threshold::Infinite, Threshold::Infinite) => Ordering::Equal,
        }
    }

    pub(crate) fn validate(self) -> Result<Self> {
        match self {
            Threshold::Finite(q) if !q.is_finite() => Err(Error::InvalidThreshold(q)),
            t => Ok(t),
        }
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::Finite(q) => write!(f, "{q}"),
            Threshold::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Admitted class indices in ascending order.
    pub labels: Vec<usize>,
    pub threshold: Threshold,
    pub alpha: f64,
}

impl PredictionSet {
    pub fn contains(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn validate_probs(probs: &[f64]) -> Result<()> {
    let invalid = |reason: String| Error::InvalidProbabilities { record: None, reason };
    if probs.is_empty() {
        return Err(invalid("empty probability vector".into()));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(invalid(format!("entry {p} is not a probability")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(invalid(format!("entries sum to {total}")));
    }
    Ok(())
}

pub fn validate_alpha(alpha: f64) -> Result<f64> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Scoring rule behind the calibrators. Larger scores mean less conforming.
pub trait ScoreFunction {
    fn score(&self, probs: &[f64], label: usize) -> Result<f64>;

    fn prediction_set(&self, probs: &[f64], threshold: Threshold, alpha: f64) -> Result<PredictionSet> {
        validate_alpha(alpha)?;
        let threshold = threshold.validate()?;
        let mut labels = Vec::new();
        for y in 0..probs.len() {
            if threshold.admits(self.score(probs, y)?) {
                labels.push(y);
            }
        }
        Ok(PredictionSet { labels, threshold, alpha })
    }
}

/// Serializable selector over the available score functions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// `1 - p(y | x)`.
    #[default]
    Hinge,
}

impl ScoreFunction for ScoreKind {
    fn score(&self, probs: &[f64], label: usize) -> Result<f64> {
        match self {
            ScoreKind::Hinge => nonconformity_score(probs, label),
        }
    }
}

/// `1 - probs[label]`.
pub fn nonconformity_score(probs: &[f64], label: usize) -> Result<f64> {
    validate_probs(probs)?;
    if label >= probs.len() {
        return Err(Error::InvalidLabel { label, n_classes: probs.len() });
    }
    Ok(hinge(probs[label]))
}

#[inline]
fn hinge(p: f64) -> f64 {
    // p is validated to lie in [0, 1 + 1e-9]
    (1.0 - p).max(0.0)
}

/// Labels whose hinge score does not exceed `threshold` (ties included).
pub fn build_prediction_set(probs: &[f64], threshold: Threshold, alpha: f64) -> Result<PredictionSet> {
    ScoreKind::Hinge.prediction_set(probs, threshold, alpha)
}
