//! Instruction-change budget and the rating-weighted distillation dataset.
//!
//! Accepted candidates credit the budget with their delta size. A credit is
//! under review until its veto window closes: a veto debits it, and the
//! distillation trigger only counts settled credits, so a vetoed candidate
//! never triggers distillation from its own credit.
//!
//! Dataset format: NDJSON, one [`DatasetRow`] per line, with a sidecar
//! manifest `<name>.manifest.json`. Training minimizes token-level
//! cross-entropy of `output` given the composed prompt of `state_commit`
//! and `input`, weighted per row by `weight = (rating - 1) / 4`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::reflection::SessionRecord;
use crate::store::write_atomic;

pub const DATASET_FORMAT: &str = "ilws-dataset/1";
pub const TRAINING_LOSS: &str = "token-level cross-entropy weighted by w = (r - 1) / 4";

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum DistillError {
    #[error("no credit recorded for candidate {candidate}")]
    UnmatchedDebit { candidate: String },
    #[error("candidate {candidate} already credited")]
    DuplicateCredit { candidate: String },
    #[error("session {session} names unresolvable commit {commit}")]
    UnresolvableCommit { session: String, commit: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("storage failure: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    value: u64,
    threshold: u64,
    /// Credits still inside their veto window, by candidate.
    under_review: BTreeMap<String, u64>,
}

impl Budget {
    pub fn new(threshold: u64) -> Self {
        Budget {
            value: 0,
            threshold,
            under_review: BTreeMap::new(),
        }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn under_review(&self) -> u64 {
        self.under_review.values().sum()
    }

    pub fn settled(&self) -> u64 {
        self.value - self.under_review()
    }

    pub fn credit(&mut self, candidate: &str, size: u64) -> Result<u64, DistillError> {
        if self.under_review.contains_key(candidate) {
            return Err(DistillError::DuplicateCredit {
                candidate: candidate.into(),
            });
        }
        self.under_review.insert(candidate.to_string(), size);
        self.value += size;
        Ok(self.value)
    }

    /// Reverses the credit of a vetoed candidate.
    pub fn debit(&mut self, candidate: &str) -> Result<u64, DistillError> {
        let size = self
            .under_review
            .remove(candidate)
            .ok_or_else(|| DistillError::UnmatchedDebit {
                candidate: candidate.into(),
            })?;
        self.value -= size;
        Ok(self.value)
    }

    /// The candidate's veto window closed; its credit can no longer be
    /// debited.
    pub fn settle(&mut self, candidate: &str) -> bool {
        self.under_review.remove(candidate).is_some()
    }

    pub fn should_distill(&self) -> bool {
        self.settled() >= self.threshold
    }

    /// Zeroes the settled part; credits under review carry over. Returns the
    /// amount cleared.
    pub fn reset(&mut self) -> u64 {
        let cleared = self.settled();
        self.value -= cleared;
        cleared
    }
}

/// `w = (r - 1) / 4`. Exact in binary floating point for every r in 1..=5.
pub fn weight(rating: u8) -> f64 {
    f64::from(rating - 1) / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub session_id: String,
    pub input: String,
    pub state_commit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub output: String,
    pub rating: u8,
    pub weight: f64,
    pub served_at: DateTime<Utc>,
}

/// One row per rated session served after `since`, ordered by serving time.
/// Rows with rating 1 stay in with weight 0.
pub fn compile_dataset<'a>(
    sessions: impl IntoIterator<Item = &'a SessionRecord>,
    since: Option<DateTime<Utc>>,
    resolves: impl Fn(&str) -> bool,
) -> Result<Vec<DatasetRow>, DistillError> {
    let mut rows = Vec::new();
    for s in sessions {
        let Some(rating) = s.rating else { continue };
        if since.is_some_and(|cut| s.served_at <= cut) {
            continue;
        }
        if !resolves(&s.state_commit) {
            return Err(DistillError::UnresolvableCommit {
                session: s.id.clone(),
                commit: s.state_commit.clone(),
            });
        }
        rows.push(DatasetRow {
            session_id: s.id.clone(),
            input: s.input.clone(),
            state_commit: s.state_commit.clone(),
            prompt: None,
            output: s.output.clone(),
            rating,
            weight: weight(rating),
            served_at: s.served_at,
        });
    }
    rows.sort_by(|a, b| (a.served_at, &a.session_id).cmp(&(b.served_at, &b.session_id)));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dataset_file: String,
    pub dataset_sha256: String,
    pub rows: usize,
    pub weight_sum: f64,
    pub state_commits: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub loss: String,
    pub config: serde_json::Value,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let name = dataset
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    dataset.with_file_name(format!("{name}.manifest.json"))
}

/// Writes the rows and their manifest, each via temp file and rename.
pub fn export_dataset(
    rows: &[DatasetRow],
    path: &Path,
    config: serde_json::Value,
    created_at: DateTime<Utc>,
) -> Result<Manifest, DistillError> {
    if rows.is_empty() {
        return Err(DistillError::EmptyDataset);
    }
    let io = |e: std::io::Error| DistillError::Storage(e.to_string());
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut body = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut body, row).expect("row serializes");
        body.push(b'\n');
    }
    write_atomic(path, &body).map_err(io)?;
    let commits: BTreeSet<&str> = rows.iter().map(|r| r.state_commit.as_str()).collect();
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        dataset_file: path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned(),
        dataset_sha256: hex::encode(Sha256::digest(&body)),
        rows: rows.len(),
        weight_sum: rows.iter().map(|r| r.weight).sum(),
        state_commits: commits.into_iter().map(str::to_string).collect(),
        created_at,
        loss: TRAINING_LOSS.into(),
        config,
    };
    write_atomic(
        &manifest_path(path),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(io)?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRow>, DistillError> {
    let text = std::fs::read_to_string(path).map_err(|e| DistillError::Storage(e.to_string()))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DistillError::Storage(e.to_string())))
        .collect()
}
