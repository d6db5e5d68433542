use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::validate_probs;

/// One sample: raw covariates plus whatever a model has attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default)]
    pub patient_id: Option<String>,
    pub features: Vec<f64>,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    #[serde(default)]
    pub label: Option<usize>,
}

impl Record {
    pub fn new(id: impl Into<String>, features: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            patient_id: None,
            features,
            embedding: None,
            probs: None,
            label: None,
        }
    }

    pub fn with_probs(mut self, probs: Vec<f64>) -> Self {
        self.probs = Some(probs);
        self
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    /// Vector used by locality structures: the embedding when present, else
    /// the raw features.
    pub fn representation(&self) -> &[f64] {
        self.embedding.as_deref().unwrap_or(&self.features)
    }

    pub fn require_probs(&self) -> Result<&[f64]> {
        self.probs.as_deref().ok_or_else(|| Error::IncompleteRecord {
            id: self.id.clone(),
            field: "probs",
        })
    }

    pub fn require_label(&self) -> Result<usize> {
        self.label.ok_or_else(|| Error::IncompleteRecord {
            id: self.id.clone(),
            field: "label",
        })
    }

    /// Checks the per-record invariants against a class count.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if let Some(probs) = &self.probs {
            if probs.len() != n_classes {
                return Err(Error::InvalidProbabilities {
                    record: Some(self.id.clone()),
                    reason: format!("expected {n_classes} entries, got {}", probs.len()),
                });
            }
            validate_probs(probs).map_err(|e| match e {
                Error::InvalidProbabilities { reason, .. } => Error::InvalidProbabilities {
                    record: Some(self.id.clone()),
                    reason,
                },
                other => other,
            })?;
        }
        if let Some(label) = self.label {
            if label >= n_classes {
                return Err(Error::InvalidLabel { label, n_classes });
            }
        }
        if self.features.iter().any(|v| !v.is_finite())
            || self.embedding.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::Config(format!("record {} has non-finite coordinates", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Calibration,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::Calibration, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

/// Ordered records with one split tag each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    splits: Vec<Split>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(records: Vec<Record>, splits: Vec<Split>, n_classes: usize) -> Result<Self> {
        if records.len() != splits.len() {
            return Err(Error::Shape { expected: records.len(), got: splits.len() });
        }
        let ds = Self { records, splits, n_classes };
        ds.validate()?;
        Ok(ds)
    }

    /// All records tagged with one split (used for ingested files).
    pub fn single_split(records: Vec<Record>, split: Split, n_classes: usize) -> Result<Self> {
        let splits = vec![split; records.len()];
        Self::new(records, splits, n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let mut feature_dim = None;
        let mut embedding_dim = None;
        for r in &self.records {
            r.validate(self.n_classes)?;
            check_constant(&mut feature_dim, r.features.len())?;
            if let Some(e) = &r.embedding {
                check_constant(&mut embedding_dim, e.len())?;
            }
        }
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for (r, &s) in self.records.iter().zip(&self.splits) {
            if let Some(p) = &r.patient_id {
                if let Some(prev) = owner.insert(p, s) {
                    if prev != s {
                        return Err(Error::Config(format!(
                            "patient {p} appears in both {} and {}",
                            prev.name(),
                            s.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split(&self, split: Split) -> Vec<Record> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(r, _)| r.clone())
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn patients(&self, split: Split) -> BTreeSet<String> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .filter_map(|(r, _)| r.patient_id.clone())
            .collect()
    }
}

fn check_constant(slot: &mut Option<usize>, len: usize) -> Result<()> {
    match *slot {
        None => {
            *slot = Some(len);
            Ok(())
        }
        Some(d) if d == len => Ok(()),
        Some(d) => Err(Error::Shape { expected: d, got: len }),
    }
}
