//! File-based experiment pipeline.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! config.toml                      resolved config (without out_dir)
//! seed-<s>/data/<split>.jsonl      generated records
//! seed-<s>/data/oracle.json        scenario oracle, when it has one
//! seed-<s>/model.json
//! seed-<s>/calibrators/<name>.json
//! seed-<s>/predictions/<name>.jsonl
//! seed-<s>/coverage.csv
//! seed-<s>/decomposition.jsonl
//! aggregate.csv, coverage.csv, decomposition.jsonl, summary.md
//! ```
//!
//! Each stage reads only what earlier stages wrote, so stages can be rerun
//! one at a time. Outputs are byte-identical across runs of the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::calibrator::{Calibrator, CalibratorKind, RatioModel};
use crate::config::{CalibratorSpec, RatioSource, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{aggregate, alpha_sweep, slack_variance_comparison, CalibratedModel, ConditionalCoverage, CoverageRow};
use crate::io::{self, DecompositionLine, PredictionLine, RecordFormat, SCHEMA_VERSION};
use crate::model::LinearClassifier;
use crate::record::{Record, Split};
use crate::synth::{generate, Oracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    Train,
    Calibrate,
    Predict,
    Sweep,
    Verify,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Predict => "predict",
            Stage::Sweep => "sweep",
            Stage::Verify => "verify",
            Stage::Report => "report",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Generate => 3,
            Stage::Train => 4,
            Stage::Calibrate => 5,
            Stage::Predict => 6,
            Stage::Sweep => 7,
            Stage::Verify => 8,
            Stage::Report => 9,
        }
    }
}

/// Process exit code for filesystem failures, whatever the stage.
pub const IO_EXIT_CODE: i32 = 10;

#[derive(Debug, thiserror::Error)]
#[error("{} stage failed: {source}", .stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self.source {
            Error::Io { .. } => IO_EXIT_CODE,
            _ => self.stage.exit_code(),
        }
    }
}

pub type StageResult<T = ()> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// A resolved config plus its hash; the stages hang off this.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: RunConfig,
    hash: String,
}

impl Pipeline {
    pub fn new(mut config: RunConfig) -> StageResult<Self> {
        config.resolve().at(Stage::Config)?;
        let hash = config.hash().at(Stage::Config)?;
        Ok(Self { config, hash })
    }

    pub fn load(path: &Path) -> StageResult<Self> {
        Self::new(RunConfig::load(path).at(Stage::Config)?)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.config.out_dir.join(format!("seed-{seed}"))
    }

    fn data_path(&self, seed: u64, split: Split) -> PathBuf {
        self.seed_dir(seed).join("data").join(format!("{}.jsonl", split.name()))
    }

    fn oracle_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data").join("oracle.json")
    }

    fn model_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("model.json")
    }

    fn calibrator_path(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join("calibrators").join(format!("{name}.json"))
    }

    fn write_config(&self, stage: Stage) -> StageResult {
        let text = self.config.canonical_toml().at(stage)?;
        io::write_text(&self.config.out_dir.join("config.toml"), &text).at(stage)
    }

    /// Writes the generated splits. A no-op when records are ingested.
    pub fn generate(&self, seed: u64) -> StageResult {
        const S: Stage = Stage::Generate;
        if self.config.ingest.is_some() {
            return Ok(());
        }
        self.write_config(S)?;
        let generated = generate(&self.config.scenario, self.config.n_total, seed).at(S)?;
        for split in Split::ALL {
            let records = generated.dataset.split(split);
            io::save_records(&self.data_path(seed, split), &records, RecordFormat::Jsonl).at(S)?;
        }
        if let Some(oracle) = &generated.oracle {
            io::save_json(&self.oracle_path(seed), &self.hash, Some(seed), oracle).at(S)?;
        }
        Ok(())
    }

    /// Fits the classifier on the training split. A no-op when records are ingested.
    pub fn train(&self, seed: u64) -> StageResult {
        const S: Stage = Stage::Train;
        if self.config.ingest.is_some() {
            return Ok(());
        }
        let train = io::load_records(&self.data_path(seed, Split::Train), RecordFormat::Jsonl).at(S)?;
        let model = LinearClassifier::train(&train, self.config.scenario.n_classes, &self.config.model, seed).at(S)?;
        io::save_json(&self.model_path(seed), &self.hash, Some(seed), &model).at(S)
    }

    fn load_model(&self, seed: u64) -> Result<LinearClassifier> {
        Ok(io::load_json(&self.model_path(seed))?.payload)
    }

    fn load_oracle(&self, seed: u64) -> Result<Oracle> {
        Ok(io::load_json(&self.oracle_path(seed))?.payload)
    }

    /// Calibration and test records with probabilities and embeddings filled in.
    pub fn scored_split(&self, seed: u64, split: Split) -> Result<Vec<Record>> {
        if let Some(ingest) = &self.config.ingest {
            let path = match split {
                Split::Calibration => &ingest.calibration,
                Split::Test => &ingest.test,
                other => return Err(Error::Config(format!("ingested runs have no {} split", other.name()))),
            };
            return io::load_records(path, ingest.format_of(path)?);
        }
        let model = self.load_model(seed)?;
        let raw = io::load_records(&self.data_path(seed, split), RecordFormat::Jsonl)?;
        raw.par_iter().map(|r| model.featurize(r)).collect()
    }

    fn fit(&self, spec: &CalibratorSpec, seed: u64, cal: &[Record], test: &[Record]) -> Result<Calibrator> {
        let alpha = self.config.alphas[0];
        let mut calibrator = match spec.kind {
            CalibratorKind::Naive => Calibrator::naive(cal, alpha, spec.rule.unwrap_or(self.config.quantile_rule))?,
            CalibratorKind::Covariate => {
                let cfg = spec.covariate_config();
                match spec.ratio.unwrap_or_default() {
                    RatioSource::Kde => Calibrator::covariate(cal, test, alpha, &cfg)?,
                    RatioSource::Oracle => {
                        let oracle = self.load_oracle(seed)?;
                        let shift = oracle
                            .shift()
                            .cloned()
                            .ok_or_else(|| Error::UnsupportedScenario("scenario oracle has no density ratio".into()))?;
                        Calibrator::covariate_with_ratio(cal, alpha, RatioModel::Oracle(shift), cfg.space)?
                    }
                }
            }
            CalibratorKind::Kmeans => Calibrator::kmeans(cal, alpha, &spec.kmeans_config(seed))?,
            CalibratorKind::Ncp => Calibrator::ncp(cal, alpha, spec.weight_scheme())?,
        };
        let params = &mut calibrator.provenance.params;
        params.insert("name".into(), spec.name().to_string());
        params.insert("config_hash".into(), self.hash.clone());
        if spec.kind == CalibratorKind::Covariate {
            params.insert("ratio".into(), format!("{:?}", spec.ratio.unwrap_or_default()).to_lowercase());
        }
        calibrator.provenance.seed.get_or_insert(seed);
        Ok(calibrator)
    }

    /// Fits every configured calibrator at the first configured alpha.
    pub fn calibrate(&self, seed: u64) -> StageResult {
        const S: Stage = Stage::Calibrate;
        let cal = self.scored_split(seed, Split::Calibration).at(S)?;
        let test = self.scored_split(seed, Split::Test).at(S)?;
        for spec in &self.config.calibrators {
            let calibrator = self.fit(spec, seed, &cal, &test).at(S)?;
            io::save_json(&self.calibrator_path(seed, spec.name()), &self.hash, Some(seed), &calibrator).at(S)?;
        }
        Ok(())
    }

    pub fn load_calibrator(&self, seed: u64, name: &str) -> Result<Calibrator> {
        Ok(io::load_json(&self.calibrator_path(seed, name))?.payload)
    }

    /// Prediction sets for every test record, calibrator and alpha.
    pub fn predict(&self, seed: u64) -> StageResult {
        const S: Stage = Stage::Predict;
        let test = self.scored_split(seed, Split::Test).at(S)?;
        for spec in &self.config.calibrators {
            let base = self.load_calibrator(seed, spec.name()).at(S)?;
            let mut lines = Vec::with_capacity(test.len() * self.config.alphas.len());
            for &alpha in &self.config.alphas {
                let calibrator = base.with_alpha(alpha).at(S)?;
                let sets = test.par_iter().map(|r| calibrator.predict_set(r)).collect::<Result<Vec<_>>>().at(S)?;
                lines.extend(test.iter().zip(sets).map(|(r, set)| PredictionLine {
                    schema_version: SCHEMA_VERSION,
                    config_hash: self.hash.clone(),
                    seed,
                    calibrator: spec.name().to_string(),
                    id: r.id.clone(),
                    labels: set.labels,
                    threshold: set.threshold,
                    alpha,
                }));
            }
            let path = self.seed_dir(seed).join("predictions").join(format!("{}.jsonl", spec.name()));
            io::write_jsonl(&path, &lines).at(S)?;
        }
        Ok(())
    }

    /// Coverage, set size and empty-set rate per calibrator and alpha.
    pub fn sweep(&self, seed: u64) -> StageResult<Vec<CoverageRow>> {
        const S: Stage = Stage::Sweep;
        let test = self.scored_split(seed, Split::Test).at(S)?;
        let mut rows = Vec::new();
        for spec in &self.config.calibrators {
            let calibrator = self.load_calibrator(seed, spec.name()).at(S)?;
            rows.extend(alpha_sweep(&calibrator, spec.name(), &self.config.alphas, &test).at(S)?);
        }
        let tagged: Vec<(u64, CoverageRow)> = rows.iter().map(|r| (seed, r.clone())).collect();
        io::write_coverage_csv(&self.seed_dir(seed).join("coverage.csv"), &self.hash, &tagged).at(S)?;
        Ok(rows)
    }

    /// Monte Carlo check of the coverage-gap decomposition for every
    /// calibrator. A no-op unless the scenario has an exact density ratio.
    pub fn verify(&self, seed: u64) -> StageResult<Vec<DecompositionLine>> {
        const S: Stage = Stage::Verify;
        if !self.config.verifies() {
            return Ok(Vec::new());
        }
        let oracle = self.load_oracle(seed).at(S)?;
        let model = self.load_model(seed).at(S)?;
        let calibrators = self
            .config
            .calibrators
            .iter()
            .map(|spec| self.load_calibrator(seed, spec.name())?.with_alpha(self.config.verify.alpha))
            .collect::<Result<Vec<_>>>()
            .at(S)?;
        let predictors: Vec<CalibratedModel> = calibrators.iter().map(|c| CalibratedModel { calibrator: c, model: &model }).collect();
        let refs: Vec<&dyn ConditionalCoverage> = predictors.iter().map(|p| p as &dyn ConditionalCoverage).collect();
        let reports = slack_variance_comparison(&refs, &oracle, self.config.verify.n_mc, seed).at(S)?;
        let lines: Vec<DecompositionLine> = self
            .config
            .calibrators
            .iter()
            .zip(reports)
            .map(|(spec, report)| DecompositionLine {
                schema_version: SCHEMA_VERSION,
                config_hash: self.hash.clone(),
                calibrator: spec.name().to_string(),
                report,
            })
            .collect();
        io::write_jsonl(&self.seed_dir(seed).join("decomposition.jsonl"), &lines).at(S)?;
        Ok(lines)
    }

    /// Aggregates the per-seed files into run-level reports.
    pub fn report(&self) -> StageResult {
        const S: Stage = Stage::Report;
        self.write_config(S)?;
        let mut tagged = Vec::new();
        for &seed in &self.config.seeds {
            let path = self.seed_dir(seed).join("coverage.csv");
            for (hash, s, row) in io::read_coverage_csv(&path).at(S)? {
                if hash != self.hash {
                    return Err(Error::Config(format!(
                        "{} was written under config {hash}, current config is {}; rerun the sweep",
                        path.display(),
                        self.hash
                    )))
                    .at(S);
                }
                tagged.push((s, row));
            }
        }
        let all: Vec<CoverageRow> = tagged.iter().map(|(_, r)| r.clone()).collect();
        let agg = aggregate(&all);
        let out = &self.config.out_dir;
        io::write_aggregate_csv(&out.join("aggregate.csv"), &self.hash, &self.config.seeds, &agg).at(S)?;

        let mut decomposition = Vec::new();
        if self.config.verifies() {
            for &seed in &self.config.seeds {
                let lines: Vec<DecompositionLine> = io::read_jsonl(&self.seed_dir(seed).join("decomposition.jsonl")).at(S)?;
                decomposition.extend(lines);
            }
            io::write_jsonl(&out.join("decomposition.jsonl"), &decomposition).at(S)?;
        }

        io::write_coverage_csv(&out.join("coverage.csv"), &self.hash, &tagged).at(S)?;
        io::write_text(&out.join("summary.md"), &self.summary(&agg, &decomposition)).at(S)
    }

    fn summary(&self, agg: &[crate::eval::AggregateRow], decomposition: &[DecompositionLine]) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.config.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "# Run summary\n\nconfig hash `{}`, seeds {}\n", self.hash, seeds.join(", "));
        let _ = writeln!(s, "| calibrator | alpha | target | coverage | std | avg set size | empty rate |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in agg {
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.4} | {:.4} | {:.3} | {:.4} |",
                r.calibrator,
                r.alpha,
                1.0 - r.alpha,
                r.coverage_mean,
                r.coverage_std,
                r.avg_set_size_mean,
                r.empty_set_rate_mean
            );
        }
        if !decomposition.is_empty() {
            let _ = writeln!(s, "\n## Coverage-gap decomposition (alpha = {})\n", self.config.verify.alpha);
            let _ = writeln!(s, "| seed | calibrator | gap | cov + mean product | z | Cauchy-Schwarz bound |");
            let _ = writeln!(s, "|---|---|---|---|---|---|");
            for d in decomposition {
                let r = &d.report;
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.5} | {:.5} | {:.2} | {:.5} |",
                    r.seed,
                    d.calibrator,
                    r.coverage_gap,
                    r.identity_rhs,
                    r.identity_z(),
                    r.cs_bound
                );
            }
        }
        s
    }

    /// Every per-seed stage in order.
    pub fn run_seed(&self, seed: u64) -> StageResult {
        self.generate(seed)?;
        self.train(seed)?;
        self.calibrate(seed)?;
        self.predict(seed)?;
        self.sweep(seed)?;
        self.verify(seed)?;
        Ok(())
    }

    /// All seeds, then the report.
    pub fn run_all(&self) -> StageResult {
        self.write_config(Stage::Config)?;
        for &seed in &self.config.seeds {
            self.run_seed(seed)?;
        }
        self.report()
    }
}
