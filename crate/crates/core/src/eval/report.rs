use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actstore::{container, PromptMode};
use crate::error::{Error, Result};
use crate::probe::{Pooling, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Full,
    InDistribution,
    OutOfDistribution,
}

/// One evaluated cell. Coordinates that do not apply to a method are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub split_kind: SplitKind,
    pub n_train_positives: usize,
    pub layer: Option<u32>,
    pub prompt_mode: Option<PromptMode>,
    pub transform: Option<Transform>,
    pub pooling: Option<Pooling>,
    #[serde(rename = "Q")]
    pub q: Option<usize>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub few_shot_n: Option<usize>,
    pub seed: u64,
    pub auroc: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.auroc) {
            return Err(Error::Invariant(format!("auroc {} outside [0, 1]", self.auroc)));
        }
        Ok(())
    }

    /// Orders by every sweep coordinate, then by value.
    pub fn coordinate_cmp(&self, other: &Self) -> Ordering {
        let c = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
        (
            &self.method,
            &self.dataset,
            self.split_kind,
            self.n_train_positives,
            self.layer,
            self.prompt_mode,
        )
            .cmp(&(
                &other.method,
                &other.dataset,
                other.split_kind,
                other.n_train_positives,
                other.layer,
                other.prompt_mode,
            ))
            .then((self.transform, self.pooling, self.q).cmp(&(other.transform, other.pooling, other.q)))
            .then(c(self.c).total_cmp(&c(other.c)))
            .then((self.few_shot_n, self.seed).cmp(&(other.few_shot_n, other.seed)))
            .then(self.auroc.total_cmp(&other.auroc))
    }
}

pub fn sort_reports(reports: &mut [EvalReport]) {
    reports.sort_by(EvalReport::coordinate_cmp);
}

pub fn jsonl_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("jsonl")
}

/// Writes the CSV and its JSON-lines mirror next to it, rows sorted.
pub fn emit_report(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut rows = reports.to_vec();
    for r in &rows {
        r.validate()?;
    }
    sort_reports(&mut rows);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut jsonl = Vec::new();
    for r in &rows {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    container::write_atomic(path, &bytes)?;
    container::write_atomic(&jsonl_path(path), &jsonl)
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "method",
    "dataset",
    "split_kind",
    "n_train_positives",
    "layer",
    "prompt_mode",
    "transform",
    "pooling",
    "Q",
    "C",
    "few_shot_n",
    "seed",
    "auroc",
];

pub fn read_report(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::InvalidHeader(format!("unexpected report columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
