//! Diagonal-bandwidth Gaussian kernel density estimates and clipped density ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

/// Floor on the per-dimension sample standard deviation.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
pub const DEFAULT_CLIP: f64 = 20.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// `h_j = sigma_j * n^(-1/(d+4))`
    #[default]
    Scott,
    /// `h_j = sigma_j * (4 / ((d+2) n))^(1/(d+4))`
    Silverman,
}

impl BandwidthRule {
    pub fn factor(self, n: usize, d: usize) -> f64 {
        let n = n as f64;
        let d = d as f64;
        match self {
            BandwidthRule::Scott => n.powf(-1.0 / (d + 4.0)),
            BandwidthRule::Silverman => (4.0 / ((d + 2.0) * n)).powf(1.0 / (d + 4.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    points: Points,
    bandwidth: Vec<f64>,
    /// `-ln n - sum_j ln(h_j sqrt(2 pi))`
    log_norm: f64,
}

impl KdeModel {
    pub fn fit(points: Points, rule: BandwidthRule) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        let d = points.dim();
        let factor = rule.factor(n, d);
        let bandwidth = (0..d)
            .map(|j| {
                let mean = points.rows().map(|r| r[j]).sum::<f64>() / n as f64;
                let var = points.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                var.sqrt().max(BANDWIDTH_FLOOR) * factor
            })
            .collect();
        Self::with_bandwidth(points, bandwidth)
    }

    pub fn with_bandwidth(points: Points, bandwidth: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: points.len() });
        }
        if bandwidth.len() != points.dim() {
            return Err(Error::Shape { expected: points.dim(), got: bandwidth.len() });
        }
        if bandwidth.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::Config("KDE bandwidth must be positive and finite".into()));
        }
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_norm = -(points.len() as f64).ln() - bandwidth.iter().map(|h| h.ln() + half_ln_2pi).sum::<f64>();
        Ok(Self { points, bandwidth, log_norm })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.points.check_dim(x)?;
        let exponents: Vec<f64> = self
            .points
            .rows()
            .map(|p| {
                -0.5 * p
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidth)
                    .map(|((pj, xj), h)| ((xj - pj) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        Ok(log_sum_exp(&exponents) + self.log_norm)
    }

    /// Strictly positive density; underflow is floored at the smallest normal `f64`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp().max(f64::MIN_POSITIVE))
    }
}

pub fn fit_kde(points: Points, rule: BandwidthRule) -> Result<KdeModel> {
    KdeModel::fit(points, rule)
}

pub fn kde_density(model: &KdeModel, x: &[f64]) -> Result<f64> {
    model.density(x)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `p_test / p_cal` from two KDEs, clamped to `[1/clip, clip]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioModel {
    cal: KdeModel,
    test: KdeModel,
    clip: f64,
}

impl DensityRatioModel {
    pub fn new(cal: KdeModel, test: KdeModel, clip: f64) -> Result<Self> {
        if !(clip.is_finite() && clip >= 1.0) {
            return Err(Error::Config(format!("ratio clip must be >= 1, got {clip}")));
        }
        if cal.dim() != test.dim() {
            return Err(Error::Shape { expected: cal.dim(), got: test.dim() });
        }
        Ok(Self { cal, test, clip })
    }

    pub fn fit(cal: Points, test: Points, rule: BandwidthRule, clip: f64) -> Result<Self> {
        Self::new(KdeModel::fit(cal, rule)?, KdeModel::fit(test, rule)?, clip)
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn dim(&self) -> usize {
        self.cal.dim()
    }

    pub fn ratio(&self, x: &[f64]) -> Result<f64> {
        let log_ratio = self.test.log_density(x)? - self.cal.log_density(x)?;
        Ok(clamp_ratio(log_ratio.exp(), self.clip))
    }
}

pub(crate) fn clamp_ratio(ratio: f64, clip: f64) -> f64 {
    if ratio.is_nan() {
        return 1.0;
    }
    ratio.clamp(1.0 / clip, clip)
}

pub fn density_ratio(model: &DensityRatioModel, x: &[f64]) -> Result<f64> {
    model.ratio(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn column(values: &[f64]) -> Points {
        Points::from_flat(1, values.to_vec()).unwrap()
    }

    fn normal_sample(n: usize, mean: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| mean + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
    }

    #[test]
    fn identical_points_hit_the_floor() {
        let m = fit_kde(Points::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(), BandwidthRule::Scott).unwrap();
        let expected = BANDWIDTH_FLOOR * BandwidthRule::Scott.factor(2, 2);
        assert_eq!(m.bandwidth(), &[expected, expected]);
    }

    #[test]
    fn scott_closed_form() {
        let m = fit_kde(column(&[0.0, 2.0]), BandwidthRule::Scott).unwrap();
        let expected = 2f64.sqrt() * 2f64.powf(-0.2);
        assert!((m.bandwidth()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn scott_on_normal_sample() {
        let xs = normal_sample(1000, 0.0, 1);
        let mean = xs.iter().sum::<f64>() / 1000.0;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        let m = fit_kde(column(&xs), BandwidthRule::Scott).unwrap();
        assert!((m.bandwidth()[0] - sd * 1000f64.powf(-0.2)).abs() < 1e-12);
        assert!((m.bandwidth()[0] / sd - 0.251).abs() < 1e-3);
    }

    #[test]
    fn silverman_versus_scott() {
        // (4 / (d + 2))^(1 / (d + 4)) is above 1 for d = 1, 1 at d = 2, below after
        let xs = normal_sample(200, 0.0, 2);
        let s = fit_kde(column(&xs), BandwidthRule::Scott).unwrap();
        let v = fit_kde(column(&xs), BandwidthRule::Silverman).unwrap();
        assert!(v.bandwidth()[0] > s.bandwidth()[0]);
        for (d, wider) in [(1, true), (3, false), (8, false)] {
            let ratio = BandwidthRule::Silverman.factor(200, d) / BandwidthRule::Scott.factor(200, d);
            assert_eq!(ratio > 1.0, wider, "d = {d}");
        }
        assert!((BandwidthRule::Silverman.factor(200, 2) - BandwidthRule::Scott.factor(200, 2)).abs() < 1e-15);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_kde(column(&[1.0]), BandwidthRule::Scott),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn mode_at_cluster_center() {
        let m = fit_kde(column(&[-0.1, 0.0, 0.1]), BandwidthRule::Scott).unwrap();
        let at_zero = m.density(&[0.0]).unwrap();
        for q in [-1.0, -0.2, 0.05, 0.3, 2.0] {
            assert!(m.density(&[q]).unwrap() < at_zero);
        }
    }

    #[test]
    fn integrates_to_one() {
        let xs = normal_sample(50, 0.0, 3);
        let m = fit_kde(column(&xs), BandwidthRule::Scott).unwrap();
        let h = m.bandwidth()[0];
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - 6.0 * h;
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 6.0 * h;
        let steps = 20_000;
        let dx = (hi - lo) / steps as f64;
        // trapezoid rule
        let integral: f64 = (0..=steps)
            .map(|i| {
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * m.density(&[lo + i as f64 * dx]).unwrap()
            })
            .sum::<f64>()
            * dx;
        assert!((integral - 1.0).abs() < 1e-2, "{integral}");
    }

    #[test]
    fn far_tail_is_tiny_but_positive() {
        let m = fit_kde(column(&[0.0, 1.0]), BandwidthRule::Scott).unwrap();
        let h = m.bandwidth()[0];
        let d = m.density(&[1.0 + 20.0 * h]).unwrap();
        assert!(d > 0.0 && d < 1e-12);
        assert!(m.density(&[1e6]).unwrap() > 0.0);
    }

    #[test]
    fn permutation_invariance() {
        let xs = normal_sample(30, 0.0, 4);
        let mut ys = xs.clone();
        ys.reverse();
        let a = fit_kde(column(&xs), BandwidthRule::Scott).unwrap();
        let b = fit_kde(column(&ys), BandwidthRule::Scott).unwrap();
        for q in [-2.0, 0.0, 0.7] {
            let (da, db) = (a.density(&[q]).unwrap(), b.density(&[q]).unwrap());
            assert!((da - db).abs() <= 1e-12 * da);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = fit_kde(column(&[0.0, 1.0]), BandwidthRule::Scott).unwrap();
        assert!(matches!(m.density(&[0.0, 0.0]), Err(Error::Shape { expected: 1, got: 2 })));
    }

    #[test]
    fn ratio_of_identical_models_is_one() {
        let xs = normal_sample(100, 0.0, 5);
        let r = DensityRatioModel::fit(column(&xs), column(&xs), BandwidthRule::Scott, DEFAULT_CLIP).unwrap();
        for q in [-3.0, 0.0, 0.4, 2.5] {
            assert_eq!(r.ratio(&[q]).unwrap(), 1.0);
        }
    }

    #[test]
    fn gaussian_shift_ratio_near_oracle() {
        // cal ~ N(0,1), test ~ N(1,1): true ratio exp(x - 1/2) = 1 at x = 0.5
        let cal = normal_sample(5000, 0.0, 6);
        let test = normal_sample(5000, 1.0, 7);
        let r = DensityRatioModel::fit(column(&cal), column(&test), BandwidthRule::Scott, DEFAULT_CLIP).unwrap();
        assert!((r.ratio(&[0.5]).unwrap() - 1.0).abs() < 0.15);
    }

    #[test]
    fn clip_bound_attained() {
        let cal = normal_sample(200, 0.0, 8);
        let test = normal_sample(200, 10.0, 9);
        let r = DensityRatioModel::fit(column(&cal), column(&test), BandwidthRule::Scott, 20.0).unwrap();
        assert_eq!(r.ratio(&[10.0]).unwrap(), 20.0);
        assert_eq!(r.ratio(&[0.0]).unwrap(), 1.0 / 20.0);
    }

    #[test]
    fn log_ratio_error_shrinks_with_n() {
        let err = |n: usize| {
            let cal = normal_sample(n, 0.0, 10);
            let test = normal_sample(n, 1.0, 11);
            let r = DensityRatioModel::fit(column(&cal), column(&test), BandwidthRule::Scott, 1e6).unwrap();
            let grid: Vec<f64> = (0..41).map(|i| -0.5 + i as f64 * 0.05).collect();
            grid.iter().map(|&x| (r.ratio(&[x]).unwrap().ln() - (x - 0.5)).abs()).sum::<f64>() / grid.len() as f64
        };
        let (small, large) = (err(500), err(5000));
        assert!(large < small, "n=500: {small}, n=5000: {large}");
    }

    #[test]
    fn invalid_clip() {
        let a = fit_kde(column(&[0.0, 1.0]), BandwidthRule::Scott).unwrap();
        assert!(DensityRatioModel::new(a.clone(), a, 0.5).is_err());
    }
}
