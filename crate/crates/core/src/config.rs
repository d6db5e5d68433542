//! Run configuration, read from TOML.
//!
//! A config is resolved once (per-kind defaults filled in, names assigned)
//! and validated before any stage runs. The hash of the resolved config is
//! stamped on every report so results can be traced back to their inputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrator::{CalibratorKind, CovariateConfig, KMeansCpConfig, Space};
use crate::clustering::{DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::density::{BandwidthRule, DEFAULT_CLIP};
use crate::error::{Error, Result};
use crate::io::RecordFormat;
use crate::model::TrainConfig;
use crate::neighbors::{KernelBandwidth, WeightKind, WeightScheme};
use crate::quantile::QuantileRule;
use crate::score::validate_alpha;
use crate::synth::Scenario;

pub const DEFAULT_NCP_K: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioSource {
    #[default]
    Kde,
    /// The scenario's exact density ratio; synthetic covariate-shift runs only.
    Oracle,
}

/// One calibrator to fit. Fields that do not apply to `kind` must be left unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratorSpec {
    /// Defaults to the kind's name; must be unique within a run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: CalibratorKind,
    /// Quantile rule for naive and kmeans; defaults to the run-level rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<QuantileRule>,

    // covariate
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<RatioSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<BandwidthRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<Space>,

    // kmeans and ncp
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,

    // kmeans
    /// Clustering seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,

    // ncp
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightKind>,
    /// Fixed Gaussian kernel bandwidth; unset means the median neighbor distance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_bandwidth: Option<f64>,
}

impl CalibratorSpec {
    pub fn new(kind: CalibratorKind) -> Self {
        Self {
            name: None,
            kind,
            rule: None,
            ratio: None,
            bandwidth: None,
            clip: None,
            space: None,
            k: None,
            seed: None,
            max_iters: None,
            tol: None,
            weights: None,
            kernel_bandwidth: None,
        }
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.name())
    }

    fn set_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut note = |set: bool, field: &'static str| {
            if set {
                out.push(field);
            }
        };
        note(self.rule.is_some(), "rule");
        note(self.ratio.is_some(), "ratio");
        note(self.bandwidth.is_some(), "bandwidth");
        note(self.clip.is_some(), "clip");
        note(self.space.is_some(), "space");
        note(self.k.is_some(), "k");
        note(self.seed.is_some(), "seed");
        note(self.max_iters.is_some(), "max_iters");
        note(self.tol.is_some(), "tol");
        note(self.weights.is_some(), "weights");
        note(self.kernel_bandwidth.is_some(), "kernel_bandwidth");
        out
    }

    fn allowed_fields(kind: CalibratorKind) -> &'static [&'static str] {
        match kind {
            CalibratorKind::Naive => &["rule"],
            CalibratorKind::Covariate => &["ratio", "bandwidth", "clip", "space"],
            CalibratorKind::Kmeans => &["rule", "k", "seed", "max_iters", "tol"],
            CalibratorKind::Ncp => &["k", "weights", "kernel_bandwidth"],
        }
    }

    fn resolve(&mut self, run_rule: QuantileRule) -> Result<()> {
        let allowed = Self::allowed_fields(self.kind);
        if let Some(field) = self.set_fields().into_iter().find(|f| !allowed.contains(f)) {
            return Err(Error::Config(format!("`{field}` does not apply to a {} calibrator", self.kind.name())));
        }
        self.name = Some(self.name().to_string());
        match self.kind {
            CalibratorKind::Naive => {
                self.rule.get_or_insert(run_rule);
            }
            CalibratorKind::Covariate => {
                let d = CovariateConfig::default();
                if self.ratio.get_or_insert(RatioSource::Kde) == &RatioSource::Oracle {
                    // the oracle ratio lives in feature space
                    if self.space == Some(Space::Embedding) || self.bandwidth.is_some() {
                        return Err(Error::Config("an oracle ratio takes neither `space = \"embedding\"` nor `bandwidth`".into()));
                    }
                    self.space = Some(Space::Features);
                } else {
                    self.bandwidth.get_or_insert(d.bandwidth);
                }
                self.clip.get_or_insert(d.clip);
                self.space.get_or_insert(d.space);
                let clip = self.clip.unwrap_or(DEFAULT_CLIP);
                if !(clip.is_finite() && clip >= 1.0) {
                    return Err(Error::Config(format!("clip must be a finite value >= 1, got {clip}")));
                }
            }
            CalibratorKind::Kmeans => {
                self.rule.get_or_insert(run_rule);
                self.max_iters.get_or_insert(DEFAULT_MAX_ITERS);
                self.tol.get_or_insert(DEFAULT_TOL);
                if self.k == Some(0) {
                    return Err(Error::Config("kmeans k must be positive".into()));
                }
                if self.max_iters == Some(0) || !self.tol.is_some_and(|t| t.is_finite() && t >= 0.0) {
                    return Err(Error::Config("kmeans needs max_iters > 0 and a finite tol >= 0".into()));
                }
            }
            CalibratorKind::Ncp => {
                self.k.get_or_insert(DEFAULT_NCP_K);
                self.weights.get_or_insert(WeightKind::UniformKnn);
                if self.kernel_bandwidth.is_some() && self.weights != Some(WeightKind::GaussianKernelKnn) {
                    return Err(Error::Config("kernel_bandwidth needs weights = \"gaussian-kernel-knn\"".into()));
                }
                self.weight_scheme().validate()?;
            }
        }
        Ok(())
    }

    pub fn covariate_config(&self) -> CovariateConfig {
        let d = CovariateConfig::default();
        CovariateConfig {
            bandwidth: self.bandwidth.unwrap_or(d.bandwidth),
            clip: self.clip.unwrap_or(d.clip),
            space: self.space.unwrap_or(d.space),
        }
    }

    pub fn kmeans_config(&self, run_seed: u64) -> KMeansCpConfig {
        let d = KMeansCpConfig::default();
        KMeansCpConfig {
            k: self.k,
            seed: self.seed.unwrap_or(run_seed),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            tol: self.tol.unwrap_or(d.tol),
            rule: self.rule.unwrap_or(d.rule),
        }
    }

    pub fn weight_scheme(&self) -> WeightScheme {
        let k = self.k.unwrap_or(DEFAULT_NCP_K);
        match self.weights.unwrap_or_default() {
            WeightKind::UniformKnn => WeightScheme::uniform(k),
            WeightKind::GaussianKernelKnn => WeightScheme::gaussian(
                k,
                self.kernel_bandwidth.map_or(KernelBandwidth::MedianDistance, KernelBandwidth::Fixed),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Runs only for scenarios with a known density ratio.
    pub enabled: bool,
    pub alpha: f64,
    pub n_mc: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { enabled: true, alpha: 0.1, n_mc: 50_000 }
    }
}

/// Pre-computed calibration and test records, used instead of a synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub calibration: PathBuf,
    pub test: PathBuf,
    /// Inferred from the file extension when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<RecordFormat>,
}

impl IngestConfig {
    pub fn format_of(&self, path: &Path) -> Result<RecordFormat> {
        self.format.map_or_else(|| RecordFormat::from_path(path), Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub n_total: usize,
    #[serde(skip_serializing_if = "is_empty_path")]
    pub out_dir: PathBuf,
    pub quantile_rule: QuantileRule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestConfig>,
    pub scenario: Scenario,
    pub model: TrainConfig,
    pub verify: VerifyConfig,
    pub calibrators: Vec<CalibratorSpec>,
}

fn is_empty_path(p: &Path) -> bool {
    p.as_os_str().is_empty()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            alphas: vec![0.05, 0.1, 0.2],
            n_total: 10_000,
            out_dir: PathBuf::from("runs/default"),
            quantile_rule: QuantileRule::FiniteSample,
            ingest: None,
            scenario: Scenario::default(),
            model: TrainConfig::default(),
            verify: VerifyConfig::default(),
            calibrators: [CalibratorKind::Naive, CalibratorKind::Covariate, CalibratorKind::Kmeans, CalibratorKind::Ncp]
                .into_iter()
                .map(CalibratorSpec::new)
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves and validates a config file. Relative ingest paths are
    /// taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(ingest), Some(base)) = (cfg.ingest.as_mut(), path.parent()) {
            for p in [&mut ingest.calibration, &mut ingest.test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills per-kind defaults in place and validates everything.
    pub fn resolve(&mut self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.alphas.is_empty() {
            return bad("alphas must not be empty".into());
        }
        for &a in &self.alphas {
            validate_alpha(a).map(drop).or_else(|_| bad(format!("every alpha must lie in (0, 1), got {a}")))?;
        }
        if self.calibrators.is_empty() {
            return bad("at least one calibrator is required".into());
        }
        self.model.validate()?;
        let synthetic = self.ingest.is_none();
        if synthetic {
            self.scenario.validate()?;
            if self.n_total < 100 {
                return bad(format!("n_total must be at least 100, got {}", self.n_total));
            }
        }
        let has_ratio = synthetic && self.scenario.oracle()?.is_some_and(|o| o.has_ratio());
        let mut names = BTreeSet::new();
        for spec in &mut self.calibrators {
            spec.resolve(self.quantile_rule)?;
            if !names.insert(spec.name().to_string()) {
                return bad(format!("duplicate calibrator name `{}`", spec.name()));
            }
            if spec.ratio == Some(RatioSource::Oracle) && !has_ratio {
                return bad(format!("calibrator `{}` wants the oracle ratio, which only covariate-shift scenarios have", spec.name()));
            }
        }
        if self.verify.enabled {
            validate_alpha(self.verify.alpha).map(drop).or_else(|_| bad(format!("verify.alpha must lie in (0, 1), got {}", self.verify.alpha)))?;
            if self.verify.n_mc < 2 {
                return bad("verify.n_mc must be at least 2".into());
            }
        }
        Ok(())
    }

    /// Whether the verify stage has anything to do.
    pub fn verifies(&self) -> bool {
        self.verify.enabled && self.ingest.is_none() && self.scenario.oracle().ok().flatten().is_some_and(|o| o.has_ratio())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The config as TOML without `out_dir`, so that the same run written to
    /// two places is described identically.
    pub fn canonical_toml(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.to_toml()
    }

    /// SHA-256 (hex, first 16 characters) of [`RunConfig::canonical_toml`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ScenarioKind;

    #[test]
    fn empty_file_gives_defaults() {
        let mut cfg = RunConfig::from_toml_str("").unwrap();
        cfg.resolve().unwrap();
        assert_eq!(cfg.calibrators.len(), 4);
        assert_eq!(cfg.calibrators[3].k, Some(DEFAULT_NCP_K));
        assert_eq!(cfg.calibrators[1].ratio, Some(RatioSource::Kde));
        assert!(!cfg.verifies());
    }

    #[test]
    fn parses_full_config() {
        let text = r#"
            seeds = [1, 2]
            alphas = [0.1]
            n_total = 2000
            out_dir = "out"
            quantile_rule = "plain"

            [scenario]
            kind = "covariate-shift"
            noise = [0.6, 0.8, 1.2, 2.0]
            test_weights = [0.1, 0.15, 0.3, 0.45]

            [model]
            epochs = 50

            [verify]
            n_mc = 1000

            [[calibrators]]
            kind = "naive"

            [[calibrators]]
            name = "oracle-cp"
            kind = "covariate"
            ratio = "oracle"
            space = "features"

            [[calibrators]]
            kind = "ncp"
            k = 50
            weights = "gaussian-kernel-knn"
            kernel_bandwidth = 0.5
        "#;
        let mut cfg = RunConfig::from_toml_str(text).unwrap();
        cfg.resolve().unwrap();
        assert_eq!(cfg.scenario.kind, ScenarioKind::CovariateShift);
        assert_eq!(cfg.calibrators[0].rule, Some(QuantileRule::Plain));
        assert_eq!(cfg.calibrators[1].name(), "oracle-cp");
        assert_eq!(cfg.calibrators[2].weight_scheme(), WeightScheme::gaussian(50, KernelBandwidth::Fixed(0.5)));
        assert!(cfg.verifies());

        // the resolved form survives a round trip through TOML
        let again = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "seeds = []",
            "seeds = [1, 1]",
            "alphas = [0.0]",
            "alphas = [1.0]",
            "alphas = []",
            "n_total = 10",
            "unknown_key = 1",
            "[[calibrators]]\nkind = \"naive\"\nk = 3",
            "[[calibrators]]\nkind = \"ncp\"\nk = 0",
            "[[calibrators]]\nkind = \"ncp\"\nkernel_bandwidth = 1.0",
            "[[calibrators]]\nkind = \"covariate\"\nratio = \"oracle\"",
            "[[calibrators]]\nkind = \"covariate\"\nclip = 0.5",
            "[scenario]\nkind = \"covariate-shift\"\n[[calibrators]]\nkind = \"covariate\"\nratio = \"oracle\"\nspace = \"embedding\"",
            "[[calibrators]]\nkind = \"naive\"\n[[calibrators]]\nkind = \"naive\"",
            "[verify]\nalpha = 2.0",
            "[model]\nepochs = 0",
            "[scenario]\ndim = 0",
        ] {
            let res = RunConfig::from_toml_str(text).and_then(|mut c| c.resolve());
            assert!(res.is_err(), "accepted: {text}");
        }
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { out_dir: "elsewhere".into(), ..RunConfig::default() };
        let c = RunConfig { seeds: vec![7], ..RunConfig::default() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 16);
        assert_eq!(a.canonical_toml().unwrap(), b.canonical_toml().unwrap());
        assert!(!a.canonical_toml().unwrap().contains("out_dir"));
    }

    #[test]
    fn kmeans_seed_defaults_to_run_seed() {
        let spec = CalibratorSpec::new(CalibratorKind::Kmeans);
        assert_eq!(spec.kmeans_config(9).seed, 9);
        let spec = CalibratorSpec { seed: Some(3), ..spec };
        assert_eq!(spec.kmeans_config(9).seed, 3);
    }
}
