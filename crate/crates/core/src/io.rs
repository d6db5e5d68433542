//! Record files (JSONL and CSV), report files, and versioned JSON envelopes.
//!
//! Every file this crate writes carries `schema_version`; report files also
//! carry the run's config hash and seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{AggregateRow, CoverageRow, DecompositionReport};
use crate::record::{Dataset, Record, Split};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl RecordFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Ok(RecordFormat::Jsonl),
            Some("csv") => Ok(RecordFormat::Csv),
            _ => Err(Error::Config(format!("cannot infer record format of {}", path.display()))),
        }
    }
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    #[serde(default = "default_version")]
    schema_version: u32,
    #[serde(flatten)]
    record: Record,
}

fn check_version(path: &Path, line: usize, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("unsupported schema_version {version}"),
        });
    }
    Ok(())
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn save_records(path: &Path, records: &[Record], format: RecordFormat) -> Result<()> {
    match format {
        RecordFormat::Jsonl => {
            let mut out = create(path)?;
            for r in records {
                let line = RecordLine { schema_version: SCHEMA_VERSION, record: r.clone() };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            out.flush().map_err(|e| Error::io(path, e))
        }
        RecordFormat::Csv => save_csv(path, records),
    }
}

/// Reads and validates records. Parse failures carry the 1-based line number;
/// invariant violations name the offending record.
pub fn load_records(path: &Path, format: RecordFormat) -> Result<Vec<Record>> {
    let numbered = match format {
        RecordFormat::Jsonl => parse_jsonl(path)?,
        RecordFormat::Csv => parse_csv(path)?,
    };
    let n_classes = numbered
        .iter()
        .find_map(|(_, r)| r.probs.as_ref().map(Vec::len))
        .or_else(|| numbered.iter().filter_map(|(_, r)| r.label).max().map(|m| m + 1))
        .unwrap_or(0);
    let mut dims: Option<(usize, Option<usize>)> = None;
    for (line, r) in &numbered {
        r.validate(n_classes)?;
        let here = (r.features.len(), r.embedding.as_ref().map(Vec::len));
        match dims {
            None => dims = Some(here),
            Some((f, e)) => {
                let embedding_clash = matches!((e, here.1), (Some(a), Some(b)) if a != b);
                if f != here.0 || embedding_clash {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: *line,
                        message: format!("record {} has inconsistent dimensions", r.id),
                    });
                }
                if e.is_none() {
                    dims = Some((f, here.1));
                }
            }
        }
    }
    Ok(numbered.into_iter().map(|(_, r)| r).collect())
}

/// Loads a record file as a dataset whose records all carry `split`.
pub fn load_dataset(path: &Path, format: RecordFormat, split: Split) -> Result<Dataset> {
    let records = load_records(path, format)?;
    let n_classes = records
        .iter()
        .find_map(|r| r.probs.as_ref().map(Vec::len))
        .or_else(|| records.iter().filter_map(|r| r.label).max().map(|m| m + 1))
        .unwrap_or(0);
    Dataset::single_split(records, split, n_classes)
}

fn parse_jsonl(path: &Path) -> Result<Vec<(usize, Record)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        check_version(path, i + 1, parsed.schema_version)?;
        out.push((i + 1, parsed.record));
    }
    Ok(out)
}

fn vector_width(records: &[Record], pick: impl Fn(&Record) -> Option<usize>) -> usize {
    records.iter().filter_map(pick).max().unwrap_or(0)
}

fn save_csv(path: &Path, records: &[Record]) -> Result<()> {
    let nf = vector_width(records, |r| Some(r.features.len()));
    let ne = vector_width(records, |r| r.embedding.as_ref().map(Vec::len));
    let np = vector_width(records, |r| r.probs.as_ref().map(Vec::len));
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["schema_version".to_string(), "id".into(), "patient_id".into(), "label".into()];
    header.extend((0..nf).map(|j| format!("features_{j}")));
    header.extend((0..ne).map(|j| format!("embedding_{j}")));
    header.extend((0..np).map(|j| format!("probs_{j}")));
    w.write_record(&header)?;
    let cells = |v: Option<&Vec<f64>>, width: usize| -> Vec<String> {
        match v {
            Some(v) => v.iter().map(f64::to_string).collect(),
            None => vec![String::new(); width],
        }
    };
    for r in records {
        let mut row = vec![
            SCHEMA_VERSION.to_string(),
            r.id.clone(),
            r.patient_id.clone().unwrap_or_default(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        row.extend(cells(Some(&r.features), nf));
        row.extend(cells(r.embedding.as_ref(), ne));
        row.extend(cells(r.probs.as_ref(), np));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_csv(path: &Path) -> Result<Vec<(usize, Record)>> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let header = reader.headers()?.clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let indexed = |prefix: &str| -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok()).map(|j| (j, i)))
            .collect();
        cols.sort_unstable();
        cols.into_iter().map(|(_, i)| i).collect()
    };
    let (features, embedding, probs) = (indexed("features_"), indexed("embedding_"), indexed("probs_"));
    let id_col = column("id").ok_or_else(|| Error::Parse { path: path.to_path_buf(), line: 1, message: "missing `id` column".into() })?;
    let (version_col, patient_col, label_col) = (column("schema_version"), column("patient_id"), column("label"));

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let fail = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let row = row.map_err(|e| fail(e.to_string()))?;
        let cell = |c: usize| row.get(c).unwrap_or("").trim();
        if let Some(c) = version_col {
            let v: u32 = cell(c).parse().map_err(|_| fail(format!("bad schema_version `{}`", cell(c))))?;
            check_version(path, line, v)?;
        }
        let vector = |cols: &[usize], field: &str| -> Result<Option<Vec<f64>>> {
            if cols.is_empty() || cols.iter().all(|&c| cell(c).is_empty()) {
                return Ok(None);
            }
            cols.iter()
                .map(|&c| cell(c).parse::<f64>().map_err(|_| fail(format!("bad {field} value `{}`", cell(c)))))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let label = match label_col.map(cell) {
            Some(s) if !s.is_empty() => Some(s.parse::<usize>().map_err(|_| fail(format!("bad label `{s}`")))?),
            _ => None,
        };
        out.push((
            line,
            Record {
                id: cell(id_col).to_string(),
                patient_id: patient_col.map(cell).filter(|s| !s.is_empty()).map(str::to_string),
                features: vector(&features, "features")?.unwrap_or_default(),
                embedding: vector(&embedding, "embedding")?,
                probs: vector(&probs, "probs")?,
                label,
            },
        ));
    }
    Ok(out)
}

/// Versioned wrapper for JSON artifacts (models, calibrators, oracles).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub payload: T,
}

pub fn save_json<T: Serialize>(path: &Path, config_hash: &str, seed: Option<u64>, payload: &T) -> Result<()> {
    let mut out = create(path)?;
    let env = Envelope { schema_version: SCHEMA_VERSION, config_hash: config_hash.to_string(), seed, payload };
    serde_json::to_writer(&mut out, &env)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>> {
    let env: Envelope<T> = serde_json::from_reader(open(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    check_version(path, 1, env.schema_version)?;
    Ok(env)
}

const COVERAGE_HEADER: [&str; 10] = [
    "schema_version", "config_hash", "seed", "calibrator", "kind", "alpha", "coverage", "avg_set_size", "empty_set_rate", "n_test",
];

/// Coverage rows, each tagged with the seed it came from.
pub fn write_coverage_csv(path: &Path, config_hash: &str, rows: &[(u64, CoverageRow)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(COVERAGE_HEADER)?;
    for (seed, r) in rows {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            config_hash.to_string(),
            seed.to_string(),
            r.calibrator.clone(),
            r.kind.name().to_string(),
            r.alpha.to_string(),
            r.coverage.to_string(),
            r.avg_set_size.to_string(),
            r.empty_set_rate.to_string(),
            r.n_test.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct CoverageCsvRow {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    calibrator: String,
    kind: crate::calibrator::CalibratorKind,
    alpha: f64,
    coverage: f64,
    avg_set_size: f64,
    empty_set_rate: f64,
    n_test: usize,
}

/// Rows of a coverage CSV with the config hash and seed they were written under.
pub fn read_coverage_csv(path: &Path) -> Result<Vec<(String, u64, CoverageRow)>> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<CoverageCsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 2, message: e.to_string() })?;
        check_version(path, i + 2, row.schema_version)?;
        out.push((
            row.config_hash,
            row.seed,
            CoverageRow {
                calibrator: row.calibrator,
                kind: row.kind,
                alpha: row.alpha,
                coverage: row.coverage,
                avg_set_size: row.avg_set_size,
                empty_set_rate: row.empty_set_rate,
                n_test: row.n_test,
                group_coverage: None,
            },
        ));
    }
    Ok(out)
}

pub fn write_aggregate_csv(path: &Path, config_hash: &str, seeds: &[u64], rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "schema_version", "config_hash", "seeds", "calibrator", "kind", "alpha", "n_seeds",
        "coverage_mean", "coverage_std", "avg_set_size_mean", "avg_set_size_std", "empty_set_rate_mean",
    ])?;
    let seeds = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    for r in rows {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            config_hash.to_string(),
            seeds.clone(),
            r.calibrator.clone(),
            r.kind.name().to_string(),
            r.alpha.to_string(),
            r.n_seeds.to_string(),
            r.coverage_mean.to_string(),
            r.coverage_std.to_string(),
            r.avg_set_size_mean.to_string(),
            r.avg_set_size_std.to_string(),
            r.empty_set_rate_mean.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
/// A decomposition report with provenance; the report's own `seed` is the run seed.
pub struct DecompositionLine {
    pub schema_version: u32,
    pub config_hash: String,
    pub calibrator: String,
    #[serde(flatten)]
    pub report: DecompositionReport,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = create(path)?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// One predicted set, as written by the `predict` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub calibrator: String,
    pub id: String,
    pub labels: Vec<usize>,
    pub threshold: crate::score::Threshold,
    pub alpha: f64,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Files under `dir`, recursively, keyed by relative path.
pub fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.insert(path.strip_prefix(root).expect("walked under root").to_path_buf(), bytes);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_records() -> Vec<Record> {
        let mut a = Record::new("a", vec![0.1, -2.5]).with_probs(vec![0.2, 0.8]).with_label(1).with_embedding(vec![1.0, 0.3333333333333333]);
        a.patient_id = Some("p1".into());
        let b = Record::new("b", vec![1e-300, 7.0]).with_label(0);
        vec![a, b]
    }

    #[test]
    fn one_record_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        fs::write(&p, r#"{"id":"x","patient_id":null,"features":[1.0,2.0],"embedding":null,"probs":[0.5,0.5],"label":1}"#).unwrap();
        let recs = load_records(&p, RecordFormat::Jsonl).unwrap();
        assert_eq!(recs.len(), 1);
        let ds = load_dataset(&p, RecordFormat::Jsonl, Split::Test).unwrap();
        assert_eq!((ds.len(), ds.n_classes()), (1, 2));
    }

    #[test]
    fn simplex_violation_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"id\":\"ok\",\"features\":[0],\"probs\":[0.5,0.5]}\n{\"id\":\"rec-42\",\"features\":[0],\"probs\":[0.49,0.49]}\n").unwrap();
        let err = load_records(&p, RecordFormat::Jsonl).unwrap_err();
        assert!(matches!(&err, Error::InvalidProbabilities { record: Some(id), .. } if id == "rec-42"), "{err}");
    }

    #[test]
    fn parse_error_has_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"features\":[0]}\n{\"id\":\"b\",\"features\":[0}\n").unwrap();
        assert!(matches!(load_records(&p, RecordFormat::Jsonl), Err(Error::Parse { line: 2, .. })));
        let p = dir.path().join("bad.csv");
        fs::write(&p, "id,features_0,label\na,1.0,0\nb,zz,1\n").unwrap();
        assert!(matches!(load_records(&p, RecordFormat::Csv), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dims.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"features\":[0,1]}\n{\"id\":\"b\",\"features\":[0]}\n").unwrap();
        assert!(matches!(load_records(&p, RecordFormat::Jsonl), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn unknown_schema_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v2.jsonl");
        fs::write(&p, "{\"schema_version\":2,\"id\":\"a\",\"features\":[0]}\n").unwrap();
        assert!(load_records(&p, RecordFormat::Jsonl).is_err());
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        for (name, format) in [("r.jsonl", RecordFormat::Jsonl), ("r.csv", RecordFormat::Csv)] {
            let p = dir.path().join(name);
            save_records(&p, &sample_records(), format).unwrap();
            assert_eq!(load_records(&p, format).unwrap(), sample_records(), "{name}");
        }
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(RecordFormat::from_path(Path::new("a/b.csv")).unwrap(), RecordFormat::Csv);
        assert_eq!(RecordFormat::from_path(Path::new("b.jsonl")).unwrap(), RecordFormat::Jsonl);
        assert!(RecordFormat::from_path(Path::new("b.txt")).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_exact(
            features in prop::collection::vec(-1e6f64..1e6, 1..6),
            raw in prop::collection::vec(0.01f64..1.0, 2..5),
            label in 0usize..2,
        ) {
            let total: f64 = raw.iter().sum();
            let mut probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let fix = 1.0 - probs.iter().sum::<f64>();
            probs[0] += fix;
            let r = Record::new("p", features).with_probs(probs).with_label(label);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.jsonl");
            save_records(&p, std::slice::from_ref(&r), RecordFormat::Jsonl).unwrap();
            prop_assert_eq!(load_records(&p, RecordFormat::Jsonl).unwrap(), vec![r.clone()]);
            let p = dir.path().join("x.csv");
            save_records(&p, std::slice::from_ref(&r), RecordFormat::Csv).unwrap();
            prop_assert_eq!(load_records(&p, RecordFormat::Csv).unwrap(), vec![r]);
        }
    }
}
