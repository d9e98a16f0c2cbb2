//! JSONL hypothesis manifests: one record per line, unique ids, hypotheses
//! sorted by descending log-probability.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{format_err, fs_err, write_bytes, IoError};
use crate::hypotheses::HypothesisRecord;

pub fn manifest_text(records: &[HypothesisRecord]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, records: &[HypothesisRecord]) -> Result<(), IoError> {
    let text = manifest_text(records).map_err(|e| format_err(path, e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

/// Parses a manifest; errors name the offending line (1-based).
pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<HypothesisRecord>, IoError> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: HypothesisRecord = serde_json::from_str(line).map_err(|e| format_err(path, format!("line {n}: {e}")))?;
        if let Some(first) = seen.insert(record.id.clone(), n) {
            return Err(format_err(path, format!("line {n}: duplicate id {:?} (first on line {first})", record.id)));
        }
        if record.hypotheses.windows(2).any(|w| w[0].log_prob < w[1].log_prob) {
            return Err(format_err(path, format!("line {n}: hypotheses of {:?} are not sorted by log-probability", record.id)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<HypothesisRecord>, IoError> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    parse_manifest(path, &text)
}
