//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model config, tensor names and shapes, parameter count), then every
//! tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Param, ParamStore};
use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RFSEPCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<TensorEntry>,
    pub param_count: usize,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: "rfsep".into(),
        version: FORMAT_VERSION,
        config: model.config.clone(),
        params: model
            .store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        param_count: model.count_params(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * header.param_count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store.iter() {
        for v in &p.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses the header only.
pub fn read_header(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, format!("header length {len} exceeds file size {}", bytes.len())))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| corrupt(path, format!("unreadable header: {e}")))?;
    Ok((header, end))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let (header, mut pos) = read_header(bytes, path)?;
    let expected: usize = header.params.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if expected != header.param_count {
        return Err(corrupt(
            path,
            format!("header lists {expected} scalars but declares {}", header.param_count),
        ));
    }
    if bytes.len() - pos != 4 * expected {
        return Err(corrupt(
            path,
            format!("payload has {} bytes, header expects {}", bytes.len() - pos, 4 * expected),
        ));
    }
    let fresh = Model::new(header.config.clone()).map_err(|e| corrupt(path, format!("invalid config: {e}")))?;
    let mut store = ParamStore::new();
    for (entry, reference) in header.params.iter().zip(fresh.store.iter()) {
        if entry.name != reference.name || entry.shape != reference.shape {
            return Err(corrupt(
                path,
                format!(
                    "tensor {} {:?} does not match model layout {} {:?}",
                    entry.name, entry.shape, reference.name, reference.shape
                ),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let data = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        pos += 4 * n;
        store.push(Param {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    if store.len() != fresh.store.len() {
        return Err(corrupt(
            path,
            format!("{} tensors stored, model has {}", store.len(), fresh.store.len()),
        ));
    }
    Model::with_store(header.config, store)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig};
    use crate::tf_transform::StftConfig;

    fn config() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            ffw_dim: 4,
            stft: StftConfig::new(16, 8),
            window_len: 64,
            init_seed: 9,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn round_trip_preserves_outputs_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(config()).unwrap();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.store.iter().zip(loaded.store.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = model.forward(&x, Mode::Inference).unwrap();
        let b = loaded.forward(&x, Mode::Inference).unwrap();
        for (u, v) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((u - v).abs() < 1e-3 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn corrupt_files_are_diagnosed() {
        let model = Model::new(config()).unwrap();
        let bytes = encode(&model).unwrap();
        let p = Path::new("x.ckpt");
        let reason = |b: &[u8]| match decode(b, p) {
            Err(Error::Checkpoint { reason, .. }) => reason,
            other => panic!("expected checkpoint error, got {other:?}"),
        };
        assert!(reason(b"garbage").contains("magic"));
        assert!(reason(&bytes[..bytes.len() - 4]).contains("payload"));
        let mut bad_version = bytes.clone();
        bad_version[8] = 7;
        assert!(reason(&bad_version).contains("version"));
        let mut bad_json = bytes.clone();
        bad_json[20] = b'#';
        assert!(reason(&bad_json).contains("header"));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load(Path::new("/nonexistent/m.ckpt")), Err(Error::Io { .. })));
    }
}
