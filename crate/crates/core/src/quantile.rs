//! Empirical and weighted quantiles of calibration scores.
//!
//! Both routines return a [`Threshold`]. The mass condition `cum >= (1 - alpha) * total`
//! is evaluated with a relative slack of [`RANK_TOLERANCE`] so that targets which are
//! exact in real arithmetic (`(n + 1)(1 - alpha)` integral, say) are not lost to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{validate_alpha, Threshold};

pub const RANK_TOLERANCE: f64 = 1e-12;

/// Order-statistic rule for unweighted calibration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileRule {
    /// `k = ceil((n + 1)(1 - alpha))`, `+inf` when `k > n`.
    #[default]
    FiniteSample,
    /// `k = ceil(n (1 - alpha))`, the plain empirical quantile.
    Plain,
}

#[inline]
fn mass_target(total: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * total * (1.0 - RANK_TOLERANCE)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidScore { index });
    }
    Ok(())
}

/// Split-conformal threshold: the `ceil((n+1)(1-alpha))`-th smallest score.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<Threshold> {
    empirical_quantile(scores, alpha, QuantileRule::FiniteSample)
}

pub fn empirical_quantile(scores: &[f64], alpha: f64, rule: QuantileRule) -> Result<Threshold> {
    check_scores(scores)?;
    validate_alpha(alpha)?;
    let n = scores.len();
    let total = match rule {
        QuantileRule::FiniteSample => (n + 1) as f64,
        QuantileRule::Plain => n as f64,
    };
    let k = (mass_target(total, alpha).ceil() as usize).max(1);
    if k > n {
        return Ok(Threshold::Infinite);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Threshold::Finite(sorted[k - 1]))
}

/// `inf { q : sum_i w_i 1{V_i <= q} >= (1 - alpha) sum_j w_j }`.
pub fn weighted_quantile(scores: &[f64], weights: &[f64], alpha: f64) -> Result<Threshold> {
    weighted_quantile_with_atom(scores, weights, 0.0, alpha)
}

/// Weighted quantile with an extra point mass `atom` placed at `+inf`.
///
/// Returns [`Threshold::Infinite`] when the finite scores cannot accumulate
/// `1 - alpha` of the total mass.
pub fn weighted_quantile_with_atom(scores: &[f64], weights: &[f64], atom: f64, alpha: f64) -> Result<Threshold> {
    check_scores(scores)?;
    validate_alpha(alpha)?;
    if weights.len() != scores.len() {
        return Err(Error::Shape { expected: scores.len(), got: weights.len() });
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeight { index, value: weights[index] });
    }
    if !atom.is_finite() || atom < 0.0 {
        return Err(Error::InvalidWeight { index: weights.len(), value: atom });
    }
    let finite_mass: f64 = weights.iter().sum();
    if finite_mass <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let target = mass_target(finite_mass + atom, alpha);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut cum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        // accumulate the whole tie group before testing
        while i < order.len() && scores[order[i]] == value {
            cum += weights[order[i]];
            i += 1;
        }
        if cum >= target {
            return Ok(Threshold::Finite(value));
        }
    }
    Ok(Threshold::Infinite)
}
