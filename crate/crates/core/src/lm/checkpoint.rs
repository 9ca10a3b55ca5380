//! Versioned binary model checkpoint.
//!
//! Layout: magic `PLM1`, u32 little-endian header length, JSON header
//! (config + parameter manifest), then the little-endian f32 parameter
//! payload in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::{LmError, ModelConfig};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PLM1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
    dtype: String,
}

/// Writes the model to `path`. The payload is f32 regardless of the compute
/// precision.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), LmError> {
    let header = Header {
        config: model.config().clone(),
        params: Model::<T>::manifest(model.config()),
        dtype: "f32".to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| LmError::Header(e.to_string()))?;
    let flat = model.to_flat();
    let mut out = Vec::with_capacity(4 + 4 + header_bytes.len() + flat.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for value in &flat {
        out.extend_from_slice(&(value.to_f64_lossy() as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back at the requested precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>, LmError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(LmError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(LmError::Truncated {
            expected: header_len,
            found: body.len(),
        });
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| LmError::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(LmError::Header(format!("unsupported dtype {}", header.dtype)));
    }
    header.config.validate()?;
    let expected_manifest = Model::<T>::manifest(&header.config);
    if header.params != expected_manifest {
        return Err(LmError::Header(
            "parameter manifest does not match config".into(),
        ));
    }
    let n_params = Model::<T>::num_params(&header.config);
    let payload = &body[header_len..];
    let expected_bytes = n_params * 4;
    if payload.len() < expected_bytes {
        return Err(LmError::Truncated {
            expected: expected_bytes,
            found: payload.len(),
        });
    }
    if payload.len() > expected_bytes {
        return Err(LmError::SizeMismatch {
            expected: expected_bytes,
            found: payload.len(),
        });
    }
    let flat: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let mut model = Model::zeros_like(&header.config);
    model.set_from_flat(&flat);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.plm");
        let model: Model<f32> = Model::init(&tiny_config()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let back: Model<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(model.to_flat(), back.to_flat());
        assert_eq!(model.config(), back.config());
    }

    #[test]
    fn corrupt_files_yield_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.plm");
        let model: Model<f32> = Model::init(&tiny_config()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(LmError::BadMagic)
        ));

        // Truncated payload.
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(LmError::Truncated { .. })
        ));

        // Payload longer than the header implies.
        let mut long = bytes.clone();
        long.extend_from_slice(&[0u8; 4]);
        fs::write(&path, &long).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(LmError::SizeMismatch { .. })
        ));
    }
}
