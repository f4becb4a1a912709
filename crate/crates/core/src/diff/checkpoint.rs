//! Parameter checkpoints: a JSON manifest mapping tensor names to shape plus
//! row-major values. Serde round-trips f64 exactly, so reloaded checkpoints
//! reproduce bit-identical results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: (usize, usize), expected: (usize, usize) },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn save(path: &Path, named: &[(String, &Array2<f64>)]) -> Result<(), CheckpointError> {
    let tensors = named
        .iter()
        .map(|(name, arr)| {
            let entry = TensorEntry {
                shape: [arr.nrows(), arr.ncols()],
                data: arr.iter().copied().collect(),
            };
            (name.clone(), entry)
        })
        .collect();
    let manifest = Manifest { format_version: CHECKPOINT_VERSION, tensors };
    let body = serde_json::to_string(&manifest).expect("checkpoint serialization");
    fs::write(path, body)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Array2<f64>>, CheckpointError> {
    let body = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&body).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    manifest
        .tensors
        .into_iter()
        .map(|(name, entry)| {
            let [r, c] = entry.shape;
            match Array2::from_shape_vec((r, c), entry.data) {
                Ok(arr) => Ok((name, arr)),
                Err(e) => Err(CheckpointError::Malformed(format!("{name}: {e}"))),
            }
        })
        .collect()
}

/// Copy loaded tensors into an existing named parameter list, enforcing that
/// every destination tensor is present with the right shape.
pub fn restore_into(
    loaded: &BTreeMap<String, Array2<f64>>,
    dest: &mut [(String, &mut Array2<f64>)],
) -> Result<(), CheckpointError> {
    for (name, arr) in dest.iter_mut() {
        let src = loaded
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if src.dim() != arr.dim() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: src.dim(),
                expected: arr.dim(),
            });
        }
        arr.assign(src);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 + 0.1) / (j as f64 + 0.7));
        save(&path, &[("w".into(), &a)]).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded["w"], a);

        let mut dest = Array2::zeros((3, 2));
        restore_into(&loaded, &mut [("w".into(), &mut dest)]).unwrap();
        assert_eq!(dest, a);
    }

    #[test]
    fn version_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, r#"{"format_version":99,"tensors":{}}"#).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::VersionMismatch { found: 99, .. })));
    }
}
