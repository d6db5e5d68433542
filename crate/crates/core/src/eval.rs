//! Coverage evaluation and the Monte Carlo check of the covariate-shift
//! coverage-error decomposition
//! `P_test(Y in C(X)) - (1 - alpha) = Cov_cal(w, s) + E_cal[w] E_cal[s]`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::{Calibrator, CalibratorKind};
use crate::error::{Error, Result};
use crate::model::LinearClassifier;
use crate::record::Record;
use crate::synth::Oracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    /// Configured calibrator name (defaults to the kind).
    pub calibrator: String,
    pub kind: CalibratorKind,
    pub alpha: f64,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub empty_set_rate: f64,
    pub n_test: usize,
    /// Coverage per patient, when test records carry patient ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_coverage: Option<BTreeMap<String, f64>>,
}

/// Coverage of `calibrator` on labeled test records. Empty sets count as misses.
pub fn evaluate(calibrator: &Calibrator, name: &str, test: &[Record]) -> Result<CoverageRow> {
    if test.is_empty() {
        return Err(Error::EmptyTest);
    }
    let outcomes = test
        .par_iter()
        .map(|r| {
            let label = r.require_label()?;
            let set = calibrator.predict_set(r)?;
            Ok((set.contains(label), set.len()))
        })
        .collect::<Result<Vec<(bool, usize)>>>()?;

    let n = test.len() as f64;
    let covered = outcomes.iter().filter(|o| o.0).count() as f64;
    let total_size: usize = outcomes.iter().map(|o| o.1).sum();
    let empty = outcomes.iter().filter(|o| o.1 == 0).count() as f64;

    let group_coverage = if test.iter().any(|r| r.patient_id.is_some()) {
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (r, o) in test.iter().zip(&outcomes) {
            let key = r.patient_id.clone().unwrap_or_default();
            let g = groups.entry(key).or_default();
            g.0 += usize::from(o.0);
            g.1 += 1;
        }
        Some(groups.into_iter().map(|(k, (hit, total))| (k, hit as f64 / total as f64)).collect())
    } else {
        None
    };

    Ok(CoverageRow {
        calibrator: name.to_string(),
        kind: calibrator.kind(),
        alpha: calibrator.alpha(),
        coverage: covered / n,
        avg_set_size: total_size as f64 / n,
        empty_set_rate: empty / n,
        n_test: test.len(),
        group_coverage,
    })
}

/// One row per alpha, reusing the fitted scores and locality structure.
pub fn alpha_sweep(calibrator: &Calibrator, name: &str, alphas: &[f64], test: &[Record]) -> Result<Vec<CoverageRow>> {
    alphas.iter().map(|&a| evaluate(&calibrator.with_alpha(a)?, name, test)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub calibrator: String,
    pub kind: CalibratorKind,
    pub alpha: f64,
    pub n_seeds: usize,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub avg_set_size_mean: f64,
    pub avg_set_size_std: f64,
    pub empty_set_rate_mean: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over seeds, per (calibrator, alpha),
/// in order of first appearance.
pub fn aggregate(rows: &[CoverageRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64), Vec<&CoverageRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.calibrator.clone(), r.alpha.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let cov: Vec<f64> = g.iter().map(|r| r.coverage).collect();
            let size: Vec<f64> = g.iter().map(|r| r.avg_set_size).collect();
            let empty: Vec<f64> = g.iter().map(|r| r.empty_set_rate).collect();
            let (coverage_mean, coverage_std) = mean_std(&cov);
            let (avg_set_size_mean, avg_set_size_std) = mean_std(&size);
            AggregateRow {
                calibrator: key.0,
                kind: g[0].kind,
                alpha: g[0].alpha,
                n_seeds: g.len(),
                coverage_mean,
                coverage_std,
                avg_set_size_mean,
                avg_set_size_std,
                empty_set_rate_mean: mean_std(&empty).0,
            }
        })
        .collect()
}

/// A set-valued predictor whose conditional coverage can be evaluated exactly
/// from the true posterior at `x`.
pub trait ConditionalCoverage: Sync {
    fn alpha(&self) -> f64;

    /// `sum_y posterior[y] * 1{y in C(x)}`.
    fn conditional_coverage(&self, x: &[f64], posterior: &[f64]) -> Result<f64>;
}

/// A calibrator fed by a trained classifier, queried on raw covariates.
pub struct CalibratedModel<'a> {
    pub calibrator: &'a Calibrator,
    pub model: &'a LinearClassifier,
}

impl ConditionalCoverage for CalibratedModel<'_> {
    fn alpha(&self) -> f64 {
        self.calibrator.alpha()
    }

    fn conditional_coverage(&self, x: &[f64], posterior: &[f64]) -> Result<f64> {
        let record = self.model.featurize(&Record::new("mc", x.to_vec()))?;
        let set = self.calibrator.predict_set(&record)?;
        Ok(set.labels.iter().map(|&y| posterior[y]).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub alpha: f64,
    /// `mean_{x ~ P_test} c(x) - (1 - alpha)` over an independent test-side sample.
    pub coverage_gap: f64,
    pub coverage_gap_se: f64,
    pub cov_ws: f64,
    pub mean_w: f64,
    pub mean_s: f64,
    pub var_w: f64,
    pub var_s: f64,
    /// `sqrt(var_w * var_s)`.
    pub cs_bound: f64,
    /// `cov_ws + mean_w * mean_s`, the calibration-side estimate of the gap.
    pub identity_rhs: f64,
    pub identity_rhs_se: f64,
    /// Combined standard error of `coverage_gap - identity_rhs`.
    pub combined_se: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl DecompositionReport {
    /// `|coverage_gap - identity_rhs|` in units of the combined standard error.
    pub fn identity_z(&self) -> f64 {
        let diff = (self.coverage_gap - self.identity_rhs).abs();
        if self.combined_se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / self.combined_se
        }
    }

    pub fn cauchy_schwarz_holds(&self) -> bool {
        self.cov_ws.abs() <= self.cs_bound + 1e-9
    }
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

struct Draws {
    cal: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
}

fn draw(oracle: &Oracle, n_mc: usize, seed: u64) -> Draws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cal = (0..n_mc).map(|_| oracle.sample_cal(&mut rng).0).collect();
    let test = (0..n_mc).map(|_| oracle.sample_test(&mut rng).0).collect();
    Draws { cal, test }
}

fn decompose(predictor: &dyn ConditionalCoverage, oracle: &Oracle, draws: &Draws, seed: u64) -> Result<DecompositionReport> {
    let alpha = predictor.alpha();
    let target = 1.0 - alpha;
    let cal: Vec<(f64, f64)> = draws
        .cal
        .par_iter()
        .map(|x| Ok((oracle.ratio(x)?, predictor.conditional_coverage(x, &oracle.conditional(x))? - target)))
        .collect::<Result<_>>()?;
    let test_c: Vec<f64> = draws
        .test
        .par_iter()
        .map(|x| predictor.conditional_coverage(x, &oracle.conditional(x)))
        .collect::<Result<_>>()?;

    let n = cal.len() as f64;
    let w: Vec<f64> = cal.iter().map(|p| p.0).collect();
    let s: Vec<f64> = cal.iter().map(|p| p.1).collect();
    let (mean_w, var_w) = moments(&w);
    let (mean_s, var_s) = moments(&s);
    let cov_ws = w.iter().zip(&s).map(|(a, b)| (a - mean_w) * (b - mean_s)).sum::<f64>() / n;
    let ws: Vec<f64> = w.iter().zip(&s).map(|(a, b)| a * b).collect();
    let (_, var_ws) = moments(&ws);
    let (mean_c, var_c) = moments(&test_c);

    let coverage_gap_se = (var_c / test_c.len() as f64).sqrt();
    let identity_rhs_se = (var_ws / n).sqrt();
    Ok(DecompositionReport {
        alpha,
        coverage_gap: mean_c - target,
        coverage_gap_se,
        cov_ws,
        mean_w,
        mean_s,
        var_w,
        var_s,
        cs_bound: (var_w * var_s).sqrt(),
        identity_rhs: cov_ws + mean_w * mean_s,
        identity_rhs_se,
        combined_se: coverage_gap_se.hypot(identity_rhs_se),
        n_mc: cal.len(),
        seed,
    })
}

fn require_ratio(oracle: &Oracle, n_mc: usize) -> Result<()> {
    if !oracle.has_ratio() {
        return Err(Error::UnsupportedScenario("verification needs a covariate-shift scenario with an exact ratio".into()));
    }
    if n_mc < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n_mc });
    }
    Ok(())
}

/// Computes both sides of the decomposition with `c(x)` taken exactly from
/// the oracle posterior. The calibration side uses `n_mc` draws from
/// `P_cal`; the coverage gap uses `n_mc` independent draws from `P_test`.
pub fn verify_decomposition(predictor: &dyn ConditionalCoverage, oracle: &Oracle, n_mc: usize, seed: u64) -> Result<DecompositionReport> {
    require_ratio(oracle, n_mc)?;
    decompose(predictor, oracle, &draw(oracle, n_mc, seed), seed)
}

/// Decomposition reports for several predictors on one shared Monte Carlo sample.
pub fn slack_variance_comparison(
    predictors: &[&dyn ConditionalCoverage],
    oracle: &Oracle,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<DecompositionReport>> {
    require_ratio(oracle, n_mc)?;
    let draws = draw(oracle, n_mc, seed);
    predictors.iter().map(|p| decompose(*p, oracle, &draws, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrator::fit_naive;
    use crate::score::Threshold;
    use crate::synth::{Scenario, ScenarioKind};

    fn rec(id: usize, probs: Vec<f64>, label: usize) -> Record {
        Record::new(id.to_string(), vec![0.0]).with_probs(probs).with_label(label)
    }

    fn constant_threshold(q: f64) -> Calibrator {
        // all-equal calibration scores pin the threshold
        let cal: Vec<Record> = (0..50).map(|i| rec(i, vec![1.0 - q, q], 1)).collect();
        let c = fit_naive(&cal, 0.1).unwrap();
        assert_eq!(c.global_threshold(), Threshold::Finite(1.0 - q));
        c
    }

    #[test]
    fn infinite_threshold_covers_everything() {
        let c = fit_naive(&[rec(0, vec![0.5, 0.5], 0)], 0.1).unwrap();
        let test: Vec<Record> = (0..10).map(|i| rec(i, vec![0.9, 0.1], i % 2)).collect();
        let row = evaluate(&c, "naive", &test).unwrap();
        assert_eq!((row.coverage, row.avg_set_size, row.empty_set_rate), (1.0, 2.0, 0.0));
    }

    #[test]
    fn zero_threshold_covers_nothing() {
        let c = constant_threshold(1.0);
        let test: Vec<Record> = (0..10).map(|i| rec(i, vec![0.7, 0.3], i % 2)).collect();
        let row = evaluate(&c, "naive", &test).unwrap();
        assert_eq!((row.coverage, row.avg_set_size, row.empty_set_rate), (0.0, 0.0, 1.0));
    }

    #[test]
    fn hand_counted_coverage() {
        // threshold 0.4 admits only labels with p >= 0.6
        let c = constant_threshold(0.6);
        let test = vec![rec(0, vec![0.8, 0.2], 0), rec(1, vec![0.1, 0.9], 1), rec(2, vec![0.7, 0.3], 1)];
        let row = evaluate(&c, "naive", &test).unwrap();
        assert!((row.coverage - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(row.avg_set_size, 1.0);
    }

    #[test]
    fn empty_test_rejected() {
        assert!(matches!(evaluate(&constant_threshold(0.5), "n", &[]), Err(Error::EmptyTest)));
    }

    #[test]
    fn order_invariance_and_groups() {
        let c = constant_threshold(0.6);
        let mut test: Vec<Record> = (0..30)
            .map(|i| {
                let mut r = rec(i, vec![0.65, 0.35], i % 3 % 2);
                r.patient_id = Some(format!("p{}", i % 4));
                r
            })
            .collect();
        let a = evaluate(&c, "naive", &test).unwrap();
        test.reverse();
        let b = evaluate(&c, "naive", &test).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.group_coverage.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn sweep_sizes_shrink_with_alpha() {
        let cal: Vec<Record> = (0..200).map(|i| rec(i, vec![0.3 + (i as f64) / 400.0, 0.7 - (i as f64) / 400.0], 0)).collect();
        let c = fit_naive(&cal, 0.1).unwrap();
        let test: Vec<Record> = (0..50).map(|i| rec(i, vec![0.55, 0.45], i % 2)).collect();
        let rows = alpha_sweep(&c, "naive", &[0.05, 0.5, 0.5], &test).unwrap();
        assert!(rows[1].avg_set_size <= rows[0].avg_set_size);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn aggregate_means_and_stds() {
        let row = |cov: f64| CoverageRow {
            calibrator: "naive".into(),
            kind: CalibratorKind::Naive,
            alpha: 0.1,
            coverage: cov,
            avg_set_size: 1.0,
            empty_set_rate: 0.0,
            n_test: 10,
            group_coverage: None,
        };
        let agg = aggregate(&[row(0.8), row(0.9), row(1.0)]);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].coverage_mean - 0.9).abs() < 1e-12);
        assert!((agg[0].coverage_std - 0.1).abs() < 1e-12);
        assert_eq!(agg[0].avg_set_size_std, 0.0);
    }

    struct ExactSlack(f64);

    impl ConditionalCoverage for ExactSlack {
        fn alpha(&self) -> f64 {
            self.0
        }
        fn conditional_coverage(&self, _: &[f64], _: &[f64]) -> Result<f64> {
            Ok(1.0 - self.0)
        }
    }

    #[test]
    fn zero_slack_has_zero_gap_under_any_shift() {
        let oracle = Scenario::heteroscedastic_shift().oracle().unwrap().unwrap();
        let r = verify_decomposition(&ExactSlack(0.1), &oracle, 2000, 1).unwrap();
        assert!(r.coverage_gap.abs() < 1e-12);
        assert_eq!(r.var_s, 0.0);
        assert_eq!(r.cs_bound, 0.0);
        assert!(r.cauchy_schwarz_holds());
    }

    #[test]
    fn unit_weights_kill_the_covariance() {
        let s = Scenario { kind: ScenarioKind::CovariateShift, ..Scenario::default() };
        let oracle = s.oracle().unwrap().unwrap();
        // any set rule works; here a fixed two-label set on a 4-class scenario
        struct FirstTwo;
        impl ConditionalCoverage for FirstTwo {
            fn alpha(&self) -> f64 {
                0.2
            }
            fn conditional_coverage(&self, _: &[f64], p: &[f64]) -> Result<f64> {
                Ok(p[0] + p[1])
            }
        }
        let r = verify_decomposition(&FirstTwo, &oracle, 4000, 2).unwrap();
        assert_eq!(r.cov_ws, 0.0);
        assert_eq!(r.var_w, 0.0);
        assert!((r.coverage_gap - r.mean_s).abs() <= 3.0 * r.combined_se);
    }

    #[test]
    fn iid_scenario_is_unsupported() {
        let oracle = Scenario::iid().oracle().unwrap().unwrap();
        assert!(matches!(verify_decomposition(&ExactSlack(0.1), &oracle, 100, 0), Err(Error::UnsupportedScenario(_))));
    }

    #[test]
    fn identical_predictors_have_equal_slack_variance() {
        let oracle = Scenario::heteroscedastic_shift().oracle().unwrap().unwrap();
        struct Top;
        impl ConditionalCoverage for Top {
            fn alpha(&self) -> f64 {
                0.1
            }
            fn conditional_coverage(&self, _: &[f64], p: &[f64]) -> Result<f64> {
                Ok(p.iter().copied().fold(0.0, f64::max))
            }
        }
        let reports = slack_variance_comparison(&[&Top, &Top, &ExactSlack(0.1)], &oracle, 1000, 3).unwrap();
        assert_eq!(reports[0].var_s, reports[1].var_s);
        assert_eq!(reports[2].cs_bound, 0.0);
    }
}
