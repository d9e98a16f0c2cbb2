//! On-disk formats: JSONL manifests, feature files, checkpoints, loss
//! curves and reports.

pub mod checkpoint;
pub mod manifest;

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;
use crate::train::LossPoint;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

pub(crate) fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.display().to_string(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Creates parent directories and writes `bytes` to `path`.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(fs_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(fs_err(path))?;
    f.write_all(bytes).map_err(fs_err(path))
}

/// A `[rows, cols]` matrix as two little-endian u32 dimensions followed by
/// little-endian f64 values.
pub fn write_features(path: &Path, features: &Tensor) -> Result<(), IoError> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(format_err(path, format!("features must be rank 2, got {shape:?}")));
    }
    let mut bytes = Vec::with_capacity(8 + 8 * features.len());
    for &d in shape {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_features(path: &Path) -> Result<Tensor, IoError> {
    let bytes = fs::read(path).map_err(fs_err(path))?;
    if bytes.len() < 8 {
        return Err(format_err(path, "feature file shorter than its header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(format_err(path, format!("expected {} values for [{rows}, {cols}], found {} bytes", rows * cols, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(vec![rows, cols], data).map_err(|e| format_err(path, e.to_string()))
}

/// `epoch,step,loss` rows; losses use the shortest exact decimal form.
pub fn loss_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("epoch,step,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.step, p.loss));
    }
    out
}

pub fn write_loss_csv(path: &Path, points: &[LossPoint]) -> Result<(), IoError> {
    write_bytes(path, loss_csv(points).as_bytes())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossPoint>, IoError> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || format_err(path, format!("line {}: expected epoch,step,loss", i + 1));
        let mut parts = line.split(',');
        let (Some(e), Some(s), Some(l), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        out.push(LossPoint {
            epoch: e.parse().map_err(|_| bad())?,
            step: s.parse().map_err(|_| bad())?,
            loss: l.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f/a.bin");
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap();
        write_features(&p, &t).unwrap();
        let back = read_features(&p).unwrap();
        assert!(t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_features(&p).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let pts = vec![LossPoint { epoch: 1, step: 1, loss: 0.1 + 0.2 }, LossPoint { epoch: 2, step: 9, loss: 1e-9 }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &pts).unwrap();
        assert_eq!(read_loss_csv(&p).unwrap(), pts);
        assert!(loss_csv(&pts).starts_with("epoch,step,loss\n1,1,"));
    }
}
