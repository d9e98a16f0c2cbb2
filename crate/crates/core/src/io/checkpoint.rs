//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `WLLMCKPT`, the header length as a little-endian
//! u64, the JSON header, then every tensor's little-endian f64 values back
//! to back. The header holds the format version, the model config, the
//! tensor directory and the SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{format_err, fs_err, write_bytes, IoError};
use crate::acoustic::{AcousticConfig, ToyAcoustic};
use crate::config::ModelConfig;
use crate::init_bridge::{AdapterInit, CrossAttentionSource, PaddingTemplate};
use crate::lm::ToyLm;
use crate::numerics::Tensor;
use crate::params::{ParamSet, Role};
use crate::seed::rng_for;

pub const MAGIC: &[u8; 8] = b"WLLMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const TEMPLATE_NAME: &str = "lm.padding_template";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    /// Whether the language model carries acoustic branches.
    #[serde(default)]
    pub acoustic_attached: bool,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(kind: &str, config: serde_json::Value, acoustic_attached: bool, tensors: &[(String, Role, &Tensor)]) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut directory = Vec::with_capacity(tensors.len());
    for (name, role, t) in tensors {
        directory.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64le".into(),
            offset: payload.len(),
            role: *role,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        config,
        acoustic_attached,
        tensors: directory,
        payload_sha256: format!("{:x}", Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Container, IoError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| format_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| format_err(path, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {}", header.format_version)));
    }
    let payload = &bytes[16 + len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f64le" {
            return Err(format_err(path, format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let raw = payload
            .get(entry.offset..entry.offset + 8 * n)
            .ok_or_else(|| format_err(path, format!("payload truncated: tensor {} is missing", entry.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| format_err(path, e.to_string()))?;
        tensors.push((entry.name.clone(), t));
    }
    if format!("{:x}", Sha256::digest(payload)) != header.payload_sha256 {
        return Err(format_err(path, "payload digest does not match header"));
    }
    Ok(Container { header, tensors })
}

pub fn read(path: &Path) -> Result<Container, IoError> {
    let bytes = fs::read(path).map_err(fs_err(path))?;
    decode(path, &bytes)
}

fn entries(model: &impl ParamSet) -> Vec<(String, Role, Tensor)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p| out.push((name, p.role, p.value().clone())));
    out
}

fn fill(path: &Path, model: &mut impl ParamSet, container: &Container) -> Result<(), IoError> {
    let mut by_name: std::collections::HashMap<&str, &Tensor> = container.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut missing = None;
    model.visit_params_mut(&mut |name, p| match by_name.remove(name.as_str()) {
        Some(t) if t.shape() == p.value().shape() => p.set(t.clone()),
        _ => {
            missing.get_or_insert(name);
        }
    });
    if let Some(name) = missing {
        return Err(format_err(path, format!("tensor {name} is missing or has the wrong shape")));
    }
    by_name.remove(TEMPLATE_NAME);
    if let Some(extra) = by_name.keys().next() {
        return Err(format_err(path, format!("unexpected tensor {extra}")));
    }
    model.set_phase(crate::params::Phase::Frozen);
    Ok(())
}

pub fn lm_bytes(lm: &ToyLm) -> Vec<u8> {
    let mut owned = entries(lm);
    if let Some(t) = &lm.template {
        owned.push((TEMPLATE_NAME.into(), Role::Base, t.tensor().clone()));
    }
    let refs: Vec<(String, Role, &Tensor)> = owned.iter().map(|(n, r, t)| (n.clone(), *r, t)).collect();
    let config = serde_json::to_value(&lm.config).expect("config serializes");
    encode("lm", config, lm.template.is_some(), &refs)
}

pub fn acoustic_bytes(model: &ToyAcoustic) -> Vec<u8> {
    let owned = entries(model);
    let refs: Vec<(String, Role, &Tensor)> = owned.iter().map(|(n, r, t)| (n.clone(), *r, t)).collect();
    encode("acoustic", serde_json::to_value(&model.config).expect("config serializes"), false, &refs)
}

pub fn save_lm(path: &Path, lm: &ToyLm) -> Result<(), IoError> {
    write_bytes(path, &lm_bytes(lm))
}

pub fn save_acoustic(path: &Path, model: &ToyAcoustic) -> Result<(), IoError> {
    write_bytes(path, &acoustic_bytes(model))
}

/// Zero cross-attention weights of the right shapes, used to rebuild the
/// structure of an attached model before its tensors are filled in.
struct ShapeSource(Vec<(Tensor, Tensor)>);

impl CrossAttentionSource for ShapeSource {
    fn cross_kv(&self) -> Vec<(&Tensor, &Tensor)> {
        self.0.iter().map(|(k, v)| (k, v)).collect()
    }
}

/// Rebuilds a language model from the config snapshot and fills every tensor.
pub fn lm_from_container(path: &Path, container: &Container) -> Result<ToyLm, IoError> {
    if container.header.kind != "lm" {
        return Err(format_err(path, format!("expected an lm checkpoint, found {}", container.header.kind)));
    }
    let config: ModelConfig = serde_json::from_value(container.header.config.clone()).map_err(|e| format_err(path, e.to_string()))?;
    let mut rng = rng_for(0, "skeleton", "lm");
    let mut lm = ToyLm::new(&config, &mut rng).map_err(|e| format_err(path, e.to_string()))?;
    if container.header.acoustic_attached {
        let w = config.audio_width;
        let source = ShapeSource((0..config.audio_layers).map(|_| (Tensor::zeros(&[w, w]), Tensor::zeros(&[w, w]))).collect());
        lm.attach_acoustic(&source, AdapterInit::Bridge, &mut rng).map_err(|e| format_err(path, e.to_string()))?;
        let template = container
            .tensors
            .iter()
            .find(|(n, _)| n == TEMPLATE_NAME)
            .ok_or_else(|| format_err(path, format!("tensor {TEMPLATE_NAME} is missing")))?;
        lm.template = Some(PaddingTemplate::from_tensor(template.1.clone()));
    }
    fill(path, &mut lm, container)?;
    Ok(lm)
}

pub fn load_lm(path: &Path) -> Result<ToyLm, IoError> {
    lm_from_container(path, &read(path)?)
}

pub fn load_acoustic(path: &Path) -> Result<ToyAcoustic, IoError> {
    let container = read(path)?;
    if container.header.kind != "acoustic" {
        return Err(format_err(path, format!("expected an acoustic checkpoint, found {}", container.header.kind)));
    }
    let config: AcousticConfig = serde_json::from_value(container.header.config.clone()).map_err(|e| format_err(path, e.to_string()))?;
    let mut model = ToyAcoustic::new(&config, &mut rng_for(0, "skeleton", "acoustic"));
    fill(path, &mut model, &container)?;
    Ok(model)
}
