//! Trainer batch files and generic JSONL helpers.
//!
//! A batch file holds one canonical JSON object per trajectory, one per
//! line, with the keys `action_mask`, `advantage`, `group_index`, `preset`,
//! `prompt_tokens`, `question_id`, `response_tokens`, `reward` and `stage`.
//! `action_mask` and `advantage` cover prompt tokens followed by response
//! tokens.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use ur2_core::credit::{AdvantageBatch, TrajectoryRecord};

use crate::canonical::{self, CanonicalError};

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Encode(#[from] CanonicalError),
    #[error("{path} line {line}: {source}")]
    Decode {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("record {index} ({question_id}): {detail}")]
    InvalidRecord {
        index: usize,
        question_id: String,
        detail: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BatchError + '_ {
    move |source| BatchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Canonical JSONL bytes for a sequence of records.
pub fn encode_jsonl<T: Serialize>(records: &[T]) -> Result<String, BatchError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&canonical::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BatchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, BatchError> {
    write_atomic(path, encode_jsonl(records)?.as_bytes())?;
    Ok(records.len())
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, BatchError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| BatchError::Decode {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Checks the per-record array invariants of the trainer contract.
pub fn validate_record(index: usize, r: &TrajectoryRecord) -> Result<(), BatchError> {
    let fail = |detail: String| BatchError::InvalidRecord {
        index,
        question_id: r.question_id.clone(),
        detail,
    };
    let n = r.prompt_tokens.len() + r.response_tokens.len();
    if r.action_mask.len() != n || r.advantage.len() != n {
        return Err(fail(format!(
            "{} tokens, {} mask entries, {} advantages",
            n,
            r.action_mask.len(),
            r.advantage.len()
        )));
    }
    if r.action_mask[..r.prompt_tokens.len()].iter().any(|m| *m != 0) {
        return Err(fail("prompt token with mask 1".into()));
    }
    if r.action_mask.iter().any(|m| *m > 1) {
        return Err(fail("mask entry outside {0,1}".into()));
    }
    if !r.reward.is_finite() || r.advantage.iter().any(|a| !a.is_finite()) {
        return Err(fail("non-finite value".into()));
    }
    let scalar = r.scalar_advantage().unwrap_or(0.0);
    for (m, a) in r.action_mask.iter().zip(&r.advantage) {
        let want = if *m == 1 { scalar } else { 0.0 };
        if a.to_bits() != want.to_bits() && !(*a == 0.0 && want == 0.0) {
            return Err(fail("advantage not broadcast over the mask".into()));
        }
    }
    Ok(())
}

/// Writes a batch file and returns the number of records.
pub fn emit_batch(batch: &AdvantageBatch, path: &Path) -> Result<usize, BatchError> {
    for (i, r) in batch.records.iter().enumerate() {
        validate_record(i, r)?;
    }
    write_jsonl(path, &batch.records)
}

pub fn load_batch(path: &Path) -> Result<Vec<TrajectoryRecord>, BatchError> {
    let records: Vec<TrajectoryRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        validate_record(i, r)?;
    }
    Ok(records)
}
