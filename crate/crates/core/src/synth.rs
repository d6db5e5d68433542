//! Synthetic data-generating processes with oracle access to `P(Y | X)` and,
//! for covariate shift, the exact density ratio `p_test(x) / p_cal(x)`.
//!
//! Three kinds are available:
//!
//! - `iid`: a class-balanced isotropic Gaussian mixture; every split comes from it.
//! - `covariate-shift`: calibration-side covariates come from the reference
//!   mixture, test covariates from a mixture with re-weighted and translated
//!   components. Test labels are drawn from the reference posterior, so the
//!   conditional `P(Y | X)` is shared by construction.
//! - `patient-shift`: every sample belongs to a patient whose isotropic
//!   Gaussian random effect is added to the features. The mean of the effect
//!   drifts with enrollment order along (+1, -1, +1, ...) / sqrt(d), and
//!   patients are split as contiguous enrollment blocks, so later cohorts sit
//!   further from where the classifier was trained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::density::log_sum_exp;
use crate::error::{Error, Result};
use crate::record::{Dataset, Record, Split};

/// Split fractions for train, valid, calibration; test takes the remainder.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.60, 0.10, 0.15];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Iid,
    CovariateShift,
    PatientShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub dim: usize,
    pub n_classes: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    /// Per-class isotropic noise standard deviation (a single value broadcasts).
    pub noise: Vec<f64>,
    /// Translation applied to every test component mean (covariate shift).
    pub shift: Vec<f64>,
    /// Test component weights (covariate shift); `None` keeps the reference weights.
    pub test_weights: Option<Vec<f64>>,
    pub n_patients: usize,
    /// Standard deviation of each coordinate of a patient's random effect.
    pub effect_scale: f64,
    /// Length of the effect-mean drift between the first and last patient.
    pub cohort_drift: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Iid,
            dim: 4,
            n_classes: 4,
            separation: 2.5,
            noise: vec![1.0],
            shift: Vec::new(),
            test_weights: None,
            n_patients: 100,
            effect_scale: 0.0,
            cohort_drift: 0.0,
        }
    }
}

impl Scenario {
    pub fn iid() -> Self {
        Self::default()
    }

    /// Class-dependent noise with a test population tilted toward the noisy classes.
    pub fn heteroscedastic_shift() -> Self {
        Self {
            kind: ScenarioKind::CovariateShift,
            noise: vec![0.6, 0.8, 1.2, 2.0],
            test_weights: Some(vec![0.1, 0.15, 0.3, 0.45]),
            ..Self::default()
        }
    }

    pub fn patient_shift() -> Self {
        Self {
            kind: ScenarioKind::PatientShift,
            n_patients: 200,
            effect_scale: 0.5,
            cohort_drift: 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("scenario dim must be positive".into());
        }
        if self.n_classes < 2 || self.n_classes > 2 * self.dim {
            return bad(format!("scenario needs 2 <= n_classes <= 2 * dim, got {}", self.n_classes));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return bad("separation must be finite and non-negative".into());
        }
        if !(self.noise.len() == 1 || self.noise.len() == self.n_classes) {
            return bad(format!("noise needs 1 or {} entries", self.n_classes));
        }
        if self.noise.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("noise scales must be positive".into());
        }
        if !self.shift.is_empty() && self.shift.len() != self.dim {
            return bad(format!("shift needs {} entries", self.dim));
        }
        if self.shift.iter().any(|v| !v.is_finite()) {
            return bad("shift must be finite".into());
        }
        if let Some(w) = &self.test_weights {
            if w.len() != self.n_classes || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad("test_weights must be n_classes non-negative values with positive sum".into());
            }
        }
        if self.kind == ScenarioKind::PatientShift {
            if self.n_patients < 4 {
                return bad("patient-shift needs at least 4 patients".into());
            }
            if !(self.effect_scale.is_finite() && self.effect_scale >= 0.0) {
                return bad("effect_scale must be non-negative".into());
            }
            if !(self.cohort_drift.is_finite() && self.cohort_drift >= 0.0) {
                return bad("cohort_drift must be non-negative".into());
            }
        }
        Ok(())
    }

    fn class_noise(&self, c: usize) -> f64 {
        if self.noise.len() == 1 {
            self.noise[0]
        } else {
            self.noise[c]
        }
    }

    fn class_mean(&self, c: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        let sign = if c < self.dim { 1.0 } else { -1.0 };
        m[c % self.dim] = sign * self.separation;
        m
    }

    /// The class-balanced mixture whose posterior defines `P(Y | X)`.
    pub fn reference_mixture(&self) -> GaussianMixture {
        let c = self.n_classes;
        GaussianMixture {
            means: (0..c).map(|k| self.class_mean(k)).collect(),
            sds: (0..c).map(|k| self.class_noise(k)).collect(),
            weights: vec![1.0 / c as f64; c],
        }
    }

    fn test_mixture(&self) -> GaussianMixture {
        let mut m = self.reference_mixture();
        if !self.shift.is_empty() {
            for mean in &mut m.means {
                for (v, s) in mean.iter_mut().zip(&self.shift) {
                    *v += s;
                }
            }
        }
        if let Some(w) = &self.test_weights {
            let total: f64 = w.iter().sum();
            m.weights = w.iter().map(|v| v / total).collect();
        }
        m
    }

    pub fn oracle(&self) -> Result<Option<Oracle>> {
        self.validate()?;
        Ok(match self.kind {
            ScenarioKind::Iid => Some(Oracle { reference: self.reference_mixture(), shift: None }),
            ScenarioKind::CovariateShift => Some(Oracle {
                reference: self.reference_mixture(),
                shift: Some(ShiftOracle { cal: self.reference_mixture(), test: self.test_mixture() }),
            }),
            ScenarioKind::PatientShift => None,
        })
    }
}

/// Mixture of isotropic Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub sds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `ln(weight_c) + ln N(x; mean_c, sd_c^2 I)` for every component.
    pub fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.means
            .iter()
            .zip(&self.sds)
            .zip(&self.weights)
            .map(|((m, &s), &w)| {
                let sq: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * sq / (s * s) - d * (s.ln() + half_ln_2pi)
            })
            .collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_joint(x))
    }

    /// Component posterior at `x`.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let lj = self.log_joint(x);
        let norm = log_sum_exp(&lj);
        let mut p: Vec<f64> = lj.iter().map(|v| (v - norm).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        p
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let c = categorical(rng, &self.weights);
        let x = self.means[c]
            .iter()
            .map(|m| m + self.sds[c] * normal(rng))
            .collect();
        (c, x)
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    // rounding left u at the very end of the range
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Exact covariate densities on both sides of a shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftOracle {
    pub cal: GaussianMixture,
    pub test: GaussianMixture,
}

impl ShiftOracle {
    pub fn dim(&self) -> usize {
        self.cal.dim()
    }

    pub fn ratio(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: x.len() });
        }
        Ok((self.test.log_pdf(x) - self.cal.log_pdf(x)).exp())
    }
}

/// Ground truth for a generated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    reference: GaussianMixture,
    shift: Option<ShiftOracle>,
}

impl Oracle {
    pub fn dim(&self) -> usize {
        self.reference.dim()
    }

    pub fn n_classes(&self) -> usize {
        self.reference.means.len()
    }

    /// Exact `P(Y | X = x)`.
    pub fn conditional(&self, x: &[f64]) -> Vec<f64> {
        self.reference.posterior(x)
    }

    pub fn shift(&self) -> Option<&ShiftOracle> {
        self.shift.as_ref()
    }

    pub fn has_ratio(&self) -> bool {
        self.shift.is_some()
    }

    pub fn ratio(&self, x: &[f64]) -> Result<f64> {
        match &self.shift {
            Some(s) => s.ratio(x),
            None => Err(Error::UnsupportedScenario("scenario has no density ratio".into())),
        }
    }

    /// A labeled draw from the calibration-side joint distribution.
    pub fn sample_cal<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let (c, x) = self.reference.sample(rng);
        (x, c)
    }

    /// A labeled draw from the test-side joint distribution.
    pub fn sample_test<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        match &self.shift {
            None => self.sample_cal(rng),
            Some(s) => {
                let (_, x) = s.test.sample(rng);
                let y = categorical(rng, &self.reference.posterior(&x));
                (x, y)
            }
        }
    }
}

pub fn oracle_conditional(oracle: &Oracle, x: &[f64]) -> Vec<f64> {
    oracle.conditional(x)
}

/// Sizes of train, valid, calibration and test for `n` samples.
pub fn split_sizes(n: usize) -> [usize; 4] {
    let [a, b, c] = SPLIT_FRACTIONS.map(|f| (f * n as f64).round() as usize);
    [a, b, c, n - a - b - c]
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub oracle: Option<Oracle>,
}

pub fn generate(scenario: &Scenario, n_total: usize, seed: u64) -> Result<Generated> {
    scenario.validate()?;
    if n_total < 100 {
        return Err(Error::Config(format!("n_total must be at least 100, got {n_total}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle = scenario.oracle()?;
    let (records, splits) = match (&scenario.kind, &oracle) {
        (ScenarioKind::PatientShift, _) => patient_records(scenario, n_total, &mut rng),
        (_, Some(oracle)) => {
            let sizes = split_sizes(n_total);
            let mut records = Vec::with_capacity(n_total);
            let mut splits = Vec::with_capacity(n_total);
            for (split, &size) in Split::ALL.iter().zip(&sizes) {
                for _ in 0..size {
                    let (x, y) = if *split == Split::Test { oracle.sample_test(&mut rng) } else { oracle.sample_cal(&mut rng) };
                    records.push(Record::new(format!("s{}", records.len()), x).with_label(y));
                    splits.push(*split);
                }
            }
            (records, splits)
        }
        (_, None) => unreachable!("iid and covariate-shift scenarios always have an oracle"),
    };
    Ok(Generated { dataset: Dataset::new(records, splits, scenario.n_classes)?, oracle })
}

fn patient_records(scenario: &Scenario, n_total: usize, rng: &mut ChaCha8Rng) -> (Vec<Record>, Vec<Split>) {
    let p = scenario.n_patients.min(n_total);
    let base = n_total / p;
    let extra = n_total % p;
    let cuts = {
        let [a, b, c, _] = split_sizes(n_total);
        [a, a + b, a + b + c]
    };
    let mut records = Vec::with_capacity(n_total);
    let mut splits = Vec::with_capacity(n_total);
    let mut start = 0;
    for patient in 0..p {
        let count = base + usize::from(patient < extra);
        let split = match cuts.iter().position(|&cut| start < cut) {
            Some(0) => Split::Train,
            Some(1) => Split::Valid,
            Some(2) => Split::Calibration,
            _ => Split::Test,
        };
        let t = patient as f64 / (p - 1) as f64;
        let drift = scenario.cohort_drift * t / (scenario.dim as f64).sqrt();
        let effect: Vec<f64> = (0..scenario.dim)
            .map(|j| if j % 2 == 0 { drift } else { -drift } + scenario.effect_scale * normal(rng))
            .collect();
        for _ in 0..count {
            let y = rng.gen_range(0..scenario.n_classes);
            let sd = scenario.class_noise(y);
            let x: Vec<f64> = scenario
                .class_mean(y)
                .iter()
                .zip(&effect)
                .map(|(m, e)| m + e + sd * normal(rng))
                .collect();
            let mut r = Record::new(format!("s{}", records.len()), x).with_label(y);
            r.patient_id = Some(format!("p{patient:04}"));
            records.push(r);
            splits.push(split);
        }
        start += count;
    }
    (records, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_sizes() {
        assert_eq!(split_sizes(1000), [600, 100, 150, 150]);
        let g = generate(&Scenario::iid(), 1000, 1).unwrap();
        let d = &g.dataset;
        assert_eq!(
            Split::ALL.map(|s| d.split_len(s)),
            [600, 100, 150, 150]
        );
    }

    #[test]
    fn zero_shift_ratio_is_one() {
        let s = Scenario { kind: ScenarioKind::CovariateShift, shift: vec![0.0; 4], ..Scenario::default() };
        let oracle = s.oracle().unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (x, _) = oracle.sample_cal(&mut rng);
            assert_eq!(oracle.ratio(&x).unwrap(), 1.0);
        }
    }

    #[test]
    fn ratio_has_unit_mean_under_calibration() {
        let oracle = Scenario::heteroscedastic_shift().oracle().unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..20_000).map(|_| oracle.ratio(&oracle.sample_cal(&mut rng).0).unwrap()).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let se = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn translated_shift_ratio_has_unit_mean() {
        let s = Scenario { kind: ScenarioKind::CovariateShift, shift: vec![0.5, -0.3, 0.0, 0.2], ..Scenario::default() };
        let oracle = s.oracle().unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: Vec<f64> = (0..40_000).map(|_| oracle.ratio(&oracle.sample_cal(&mut rng).0).unwrap()).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let se = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn posterior_at_separated_mean() {
        let s = Scenario { separation: 6.0, ..Scenario::default() };
        let oracle = s.oracle().unwrap().unwrap();
        for k in 0..4 {
            let p = oracle.conditional(&s.class_mean(k));
            assert!(p[k] >= 0.99, "{p:?}");
        }
    }

    #[test]
    fn posterior_on_symmetric_boundary() {
        let s = Scenario { dim: 1, n_classes: 2, ..Scenario::default() };
        let p = s.oracle().unwrap().unwrap().conditional(&[0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn posterior_normalized() {
        let oracle = Scenario::heteroscedastic_shift().oracle().unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let p = oracle.conditional(&x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn patients_are_disjoint_across_splits() {
        let g = generate(&Scenario::patient_shift(), 2000, 3).unwrap();
        let d = &g.dataset;
        let sets = Split::ALL.map(|s| d.patients(s));
        for i in 0..4 {
            assert!(!sets[i].is_empty());
            for j in i + 1..4 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        assert!(g.oracle.is_none());
        assert_eq!(d.len(), 2000);
    }

    #[test]
    fn zero_effect_patient_scenario_matches_iid_moments() {
        let s = Scenario { effect_scale: 0.0, cohort_drift: 0.0, ..Scenario::patient_shift() };
        let a = generate(&s, 20_000, 4).unwrap().dataset;
        let b = generate(&Scenario::iid(), 20_000, 4).unwrap().dataset;
        let moments = |d: &Dataset| {
            let n = d.len() as f64;
            let m: f64 = d.records().iter().map(|r| r.features[0]).sum::<f64>() / n;
            let v: f64 = d.records().iter().map(|r| (r.features[0] - m).powi(2)).sum::<f64>() / n;
            (m, v)
        };
        let ((ma, va), (mb, vb)) = (moments(&a), moments(&b));
        assert!((ma - mb).abs() < 0.06 && (va - vb).abs() < 0.1, "{ma} {va} vs {mb} {vb}");
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&Scenario::heteroscedastic_shift(), 500, 9).unwrap().dataset;
        let b = generate(&Scenario::heteroscedastic_shift(), 500, 9).unwrap().dataset;
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_params() {
        assert!(generate(&Scenario::iid(), 50, 0).is_err());
        let s = Scenario { n_classes: 9, ..Scenario::default() };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = Scenario { noise: vec![1.0, -1.0, 1.0, 1.0], ..Scenario::default() };
        assert!(s.validate().is_err());
    }
}
