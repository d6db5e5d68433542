//! The four calibrators behind one fitted type.
//!
//! Every calibrator scores its calibration records once at fit time. Scores
//! and locality structures (density-ratio model, clusters, neighbor index) do
//! not depend on `alpha`; [`Calibrator::with_alpha`] re-derives only the
//! thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{default_k, kmeans_fit, KMeansModel, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::density::{BandwidthRule, DensityRatioModel, DEFAULT_CLIP};
use crate::error::{Error, Result};
use crate::neighbors::{neighbor_weights, NeighborIndex, WeightScheme};
use crate::points::Points;
use crate::quantile::{empirical_quantile, weighted_quantile, weighted_quantile_with_atom, QuantileRule, RANK_TOLERANCE};
use crate::record::Record;
use crate::score::{validate_alpha, PredictionSet, ScoreFunction, ScoreKind, Threshold};
use crate::synth::ShiftOracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibratorKind {
    Naive,
    Covariate,
    Kmeans,
    Ncp,
}

impl CalibratorKind {
    pub fn name(self) -> &'static str {
        match self {
            CalibratorKind::Naive => "naive",
            CalibratorKind::Covariate => "covariate",
            CalibratorKind::Kmeans => "kmeans",
            CalibratorKind::Ncp => "ncp",
        }
    }
}

/// Which vector of a record a locality structure looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// The embedding, or the raw features when a record has none.
    #[default]
    Embedding,
    Features,
}

impl Space {
    pub fn select(self, record: &Record) -> &[f64] {
        match self {
            Space::Embedding => record.representation(),
            Space::Features => &record.features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioModel {
    Kde(DensityRatioModel),
    /// Exact ratio of a synthetic scenario, in feature space.
    Oracle(ShiftOracle),
}

impl RatioModel {
    pub fn ratio(&self, x: &[f64]) -> Result<f64> {
        match self {
            RatioModel::Kde(m) => m.ratio(x),
            RatioModel::Oracle(o) => o.ratio(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateConfig {
    pub bandwidth: BandwidthRule,
    pub clip: f64,
    pub space: Space,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self { bandwidth: BandwidthRule::Scott, clip: DEFAULT_CLIP, space: Space::Embedding }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansCpConfig {
    /// `None` picks [`default_k`] from the calibration size.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub rule: QuantileRule,
}

impl Default for KMeansCpConfig {
    fn default() -> Self {
        Self { k: None, seed: 0, max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL, rule: QuantileRule::FiniteSample }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterThreshold {
    pub size: usize,
    pub threshold: Threshold,
    /// Too few calibration points; the global threshold is used instead.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Locality {
    Global,
    Covariate {
        ratio: RatioModel,
        space: Space,
        /// Density ratio at every calibration point.
        cal_weights: Vec<f64>,
    },
    Clusters {
        model: KMeansModel,
        clusters: Vec<ClusterThreshold>,
    },
    Neighborhood {
        index: NeighborIndex,
        scheme: WeightScheme,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    kind: CalibratorKind,
    alpha: f64,
    rule: QuantileRule,
    score: ScoreKind,
    n_classes: usize,
    cal_scores: Vec<f64>,
    /// Unweighted threshold over all calibration scores under `rule`.
    global: Threshold,
    locality: Locality,
    pub provenance: Provenance,
}

/// Scores and locality vectors of complete calibration records.
fn score_records(cal: &[Record], space: Space) -> Result<(Vec<f64>, Vec<Vec<f64>>, usize)> {
    let first = cal.first().ok_or(Error::EmptyCalibration)?;
    let n_classes = first.require_probs()?.len();
    let mut scores = Vec::with_capacity(cal.len());
    let mut vectors = Vec::with_capacity(cal.len());
    for r in cal {
        let probs = r.require_probs()?;
        if probs.len() != n_classes {
            return Err(Error::Shape { expected: n_classes, got: probs.len() });
        }
        scores.push(ScoreKind::Hinge.score(probs, r.require_label()?).map_err(|e| tag(e, r))?);
        vectors.push(space.select(r).to_vec());
    }
    Ok((scores, vectors, n_classes))
}

fn tag(e: Error, r: &Record) -> Error {
    match e {
        Error::InvalidProbabilities { reason, .. } => Error::InvalidProbabilities { record: Some(r.id.clone()), reason },
        other => other,
    }
}

/// Clusters smaller than `ceil(1 / alpha)` fall back to the global threshold.
pub fn min_cluster_occupancy(alpha: f64) -> usize {
    ((1.0 / alpha) * (1.0 - RANK_TOLERANCE)).ceil() as usize
}

impl Calibrator {
    fn base(kind: CalibratorKind, alpha: f64, rule: QuantileRule, scores: Vec<f64>, n_classes: usize, locality: Locality) -> Result<Self> {
        validate_alpha(alpha)?;
        let global = empirical_quantile(&scores, alpha, rule)?;
        let mut c = Self {
            kind,
            alpha,
            rule,
            score: ScoreKind::Hinge,
            n_classes,
            cal_scores: scores,
            global,
            locality,
            provenance: Provenance::default(),
        };
        c.refresh_cluster_thresholds()?;
        Ok(c)
    }

    /// Split conformal calibration with one global threshold.
    pub fn naive(cal: &[Record], alpha: f64, rule: QuantileRule) -> Result<Self> {
        let (scores, _, c) = score_records(cal, Space::Embedding)?;
        Self::base(CalibratorKind::Naive, alpha, rule, scores, c, Locality::Global)
    }

    /// Weighted conformal calibration with KDE-estimated density ratios.
    /// `test` only contributes covariates; labels are ignored.
    pub fn covariate(cal: &[Record], test: &[Record], alpha: f64, config: &CovariateConfig) -> Result<Self> {
        let cal_points = Points::from_rows(&cal.iter().map(|r| config.space.select(r)).collect::<Vec<_>>())?;
        let test_points = Points::from_rows(&test.iter().map(|r| config.space.select(r)).collect::<Vec<_>>())?;
        let ratio = DensityRatioModel::fit(cal_points, test_points, config.bandwidth, config.clip)?;
        let mut c = Self::covariate_with_ratio(cal, alpha, RatioModel::Kde(ratio), config.space)?;
        c.provenance.params.insert("bandwidth".into(), format!("{:?}", config.bandwidth).to_lowercase());
        c.provenance.params.insert("clip".into(), config.clip.to_string());
        Ok(c)
    }

    pub fn covariate_with_ratio(cal: &[Record], alpha: f64, ratio: RatioModel, space: Space) -> Result<Self> {
        let (scores, vectors, c) = score_records(cal, space)?;
        let cal_weights = vectors.iter().map(|v| ratio.ratio(v)).collect::<Result<Vec<_>>>()?;
        let locality = Locality::Covariate { ratio, space, cal_weights };
        let mut cal = Self::base(CalibratorKind::Covariate, alpha, QuantileRule::FiniteSample, scores, c, locality)?;
        cal.provenance.params.insert("space".into(), format!("{space:?}").to_lowercase());
        Ok(cal)
    }

    /// Per-cluster split conformal thresholds over k-means clusters.
    pub fn kmeans(cal: &[Record], alpha: f64, config: &KMeansCpConfig) -> Result<Self> {
        let (scores, vectors, c) = score_records(cal, Space::Embedding)?;
        let k = config.k.unwrap_or_else(|| default_k(scores.len()));
        let model = kmeans_fit(&Points::from_rows(&vectors)?, k, config.seed, config.max_iters, config.tol)?;
        let locality = Locality::Clusters { model, clusters: Vec::new() };
        let mut cal = Self::base(CalibratorKind::Kmeans, alpha, config.rule, scores, c, locality)?;
        cal.provenance.seed = Some(config.seed);
        cal.provenance.params.insert("k".into(), k.to_string());
        Ok(cal)
    }

    /// Neighborhood conformal calibration: a weighted quantile over each
    /// query's nearest calibration scores.
    pub fn ncp(cal: &[Record], alpha: f64, scheme: WeightScheme) -> Result<Self> {
        scheme.validate()?;
        let (scores, vectors, c) = score_records(cal, Space::Embedding)?;
        if scheme.k > scores.len() {
            return Err(Error::InvalidK { k: scheme.k, n: scores.len() });
        }
        let index = NeighborIndex::new(Points::from_rows(&vectors)?)?;
        let mut cal = Self::base(CalibratorKind::Ncp, alpha, QuantileRule::Plain, scores, c, Locality::Neighborhood { index, scheme })?;
        cal.provenance.params.insert("k".into(), scheme.k.to_string());
        Ok(cal)
    }

    fn refresh_cluster_thresholds(&mut self) -> Result<()> {
        let (alpha, rule, global) = (self.alpha, self.rule, self.global);
        if let Locality::Clusters { model, clusters } = &mut self.locality {
            let min = min_cluster_occupancy(alpha);
            let mut members: Vec<Vec<f64>> = vec![Vec::new(); model.k()];
            for (&a, &s) in model.assignments().iter().zip(&self.cal_scores) {
                members[a].push(s);
            }
            *clusters = members
                .iter()
                .map(|m| {
                    if m.len() < min {
                        Ok(ClusterThreshold { size: m.len(), threshold: global, fallback: true })
                    } else {
                        Ok(ClusterThreshold { size: m.len(), threshold: empirical_quantile(m, alpha, rule)?, fallback: false })
                    }
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Same scores and locality, thresholds re-derived for another `alpha`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        validate_alpha(alpha)?;
        let mut c = self.clone();
        c.alpha = alpha;
        c.global = empirical_quantile(&c.cal_scores, alpha, c.rule)?;
        c.refresh_cluster_thresholds()?;
        Ok(c)
    }

    pub fn kind(&self) -> CalibratorKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rule(&self) -> QuantileRule {
        self.rule
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn cal_scores(&self) -> &[f64] {
        &self.cal_scores
    }

    pub fn global_threshold(&self) -> Threshold {
        self.global
    }

    pub fn locality(&self) -> &Locality {
        &self.locality
    }

    pub fn cluster_thresholds(&self) -> Option<&[ClusterThreshold]> {
        match &self.locality {
            Locality::Clusters { clusters, .. } => Some(clusters),
            _ => None,
        }
    }

    /// Threshold this calibrator applies to `record`.
    pub fn threshold(&self, record: &Record) -> Result<Threshold> {
        match &self.locality {
            Locality::Global => Ok(self.global),
            Locality::Covariate { ratio, space, cal_weights } => {
                let atom = ratio.ratio(space.select(record))?;
                weighted_quantile_with_atom(&self.cal_scores, cal_weights, atom, self.alpha)
            }
            Locality::Clusters { model, clusters } => Ok(clusters[model.assign(record.representation())?].threshold),
            Locality::Neighborhood { index, scheme } => {
                let neighbors = index.knn(record.representation(), scheme.k)?;
                let weights = neighbor_weights(&neighbors, scheme)?;
                let scores: Vec<f64> = neighbors.iter().map(|n| self.cal_scores[n.index]).collect();
                weighted_quantile(&scores, &weights, self.alpha)
            }
        }
    }

    pub fn predict_set(&self, record: &Record) -> Result<PredictionSet> {
        let probs = record.require_probs()?;
        if probs.len() != self.n_classes {
            return Err(Error::Shape { expected: self.n_classes, got: probs.len() });
        }
        let threshold = self.threshold(record)?;
        self.score.prediction_set(probs, threshold, self.alpha).map_err(|e| tag(e, record))
    }
}

pub fn fit_naive(cal: &[Record], alpha: f64) -> Result<Calibrator> {
    Calibrator::naive(cal, alpha, QuantileRule::FiniteSample)
}

pub fn fit_covariate(cal: &[Record], test: &[Record], alpha: f64, config: &CovariateConfig) -> Result<Calibrator> {
    Calibrator::covariate(cal, test, alpha, config)
}

pub fn fit_kmeans_cp(cal: &[Record], alpha: f64, k: usize, seed: u64) -> Result<Calibrator> {
    Calibrator::kmeans(cal, alpha, &KMeansCpConfig { k: Some(k), seed, ..KMeansCpConfig::default() })
}

pub fn fit_ncp(cal: &[Record], alpha: f64, scheme: WeightScheme) -> Result<Calibrator> {
    Calibrator::ncp(cal, alpha, scheme)
}

pub fn predict_set(calibrator: &Calibrator, record: &Record) -> Result<PredictionSet> {
    calibrator.predict_set(record)
}
