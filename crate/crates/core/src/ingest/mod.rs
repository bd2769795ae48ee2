//! Experiment run logs: loading, validation, normalisation and persistence.
//!
//! Input may be CSV (header required) or JSON lines; the canonical stored
//! form is JSON lines with a `schema_version` on every record.

mod load;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::{FineTuneMethod, MethodClass};
use crate::error::{Error, Result};

pub use load::{load_runs, parse_runs, FlopCheck, LoadOptions, LoadReport, RowDiagnostic, SourceFormat};

pub const SCHEMA_VERSION: u32 = 1;

/// Which quantity plays the role of `D` in scaling-law fits.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMeasure {
    #[default]
    Tokens,
    Steps,
}

/// One fine-tuning experiment.
///
/// `method_hyper` carries the method's headline hyperparameter in plot
/// units: the LoRA rank, or the fraction of active (unfrozen) blocks for
/// block freezing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub model_name: String,
    pub n_total: u64,
    pub n_nonembed: u64,
    pub method: FineTuneMethod,
    pub method_hyper: Option<f64>,
    pub trainable_fraction: f64,
    pub tokens: f64,
    pub steps: Option<u64>,
    pub batch_size: Option<u64>,
    pub context_len: Option<u64>,
    pub flop: f64,
    pub final_loss: f64,
    pub mteb_score: Option<f64>,
    #[serde(default)]
    pub data_measure: DataMeasure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicate: Option<u32>,
}

impl RunRecord {
    pub fn method_class(&self) -> MethodClass {
        self.method.class()
    }

    /// Model size used by profiles and fits: the total parameter count.
    pub fn model_size(&self) -> f64 {
        self.n_total as f64
    }

    /// `D` under the record's data measure.
    pub fn data_quantity(&self) -> f64 {
        match self.data_measure {
            DataMeasure::Tokens => self.tokens,
            DataMeasure::Steps => self.steps.map_or(f64::NAN, |s| s as f64),
        }
    }

    /// Invariants that do not need an architecture descriptor.
    pub fn check(&self) -> std::result::Result<(), String> {
        if !(self.final_loss.is_finite() && self.final_loss > 0.0) {
            return Err(format!("final_loss must be positive, got {}", self.final_loss));
        }
        if !(self.tokens.is_finite() && self.tokens >= 0.0) {
            return Err(format!("tokens must be non-negative, got {}", self.tokens));
        }
        if !(self.flop.is_finite() && self.flop > 0.0) {
            return Err(format!("flop must be positive, got {}", self.flop));
        }
        if !(0.0..=1.0).contains(&self.trainable_fraction) {
            return Err(format!(
                "trainable_fraction must lie in [0, 1], got {}",
                self.trainable_fraction
            ));
        }
        if let Some(s) = self.mteb_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("mteb_score must lie in [0, 1], got {s}"));
            }
        }
        if self.n_nonembed > self.n_total {
            return Err(format!(
                "n_nonembed ({}) exceeds n_total ({})",
                self.n_nonembed, self.n_total
            ));
        }
        if self.data_measure == DataMeasure::Steps && self.steps.is_none() {
            return Err("data_measure is steps but steps is missing".into());
        }
        Ok(())
    }

    /// Identity used for duplicate detection.
    pub(crate) fn key(&self) -> (String, String, u64, Option<u32>) {
        (
            self.model_name.to_ascii_lowercase(),
            self.method.to_string(),
            self.flop.to_bits(),
            self.replicate,
        )
    }
}

/// Where a run set came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the source bytes (or of the generator spec).
    pub source_digest: String,
    pub schema_version: u32,
    pub origin: String,
}

/// A validated, immutable collection of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSet {
    records: Vec<RunRecord>,
    provenance: Provenance,
}

impl RunSet {
    /// Validates every record and the duplicate-key rule.
    pub fn new(records: Vec<RunRecord>, provenance: Provenance) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyRunSet(provenance.origin));
        }
        let mut seen = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            r.check()
                .map_err(|m| Error::validation("record", format!("record {i}: {m}")))?;
            if !seen.insert(r.key()) {
                return Err(Error::validation(
                    "record",
                    format!("record {i} duplicates an earlier (model, method, flop, replicate) key"),
                ));
            }
        }
        Ok(RunSet {
            records,
            provenance,
        })
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter()
    }

    pub fn method_classes(&self) -> BTreeSet<MethodClass> {
        self.records.iter().map(RunRecord::method_class).collect()
    }

    /// Records of one method class, or `None` if there are none.
    pub fn filter_class(&self, class: MethodClass) -> Option<RunSet> {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.method_class() == class)
            .cloned()
            .collect();
        (!records.is_empty()).then(|| RunSet {
            records,
            provenance: Provenance {
                origin: format!("{} [{}]", self.provenance.origin, class),
                ..self.provenance.clone()
            },
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Spearman correlation between final loss and downstream score over the
/// records that carry a score.
pub fn spearman_loss_vs_score(runs: &RunSet) -> Result<f64> {
    let (loss, score): (Vec<f64>, Vec<f64>) = runs
        .iter()
        .filter_map(|r| r.mteb_score.map(|s| (r.final_loss, s)))
        .unzip();
    if loss.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 records with mteb_score, found {}",
            loss.len()
        )));
    }
    crate::stats::spearman(&loss, &score)
}
