//! JSON checkpoints with base64-encoded little-endian f32 tensor blobs.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::params::{ModelConfig, ToyModel};
use crate::numcore::{Matrix, Rng};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorBlob {
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    config: ModelConfig,
    /// Per-layer thresholds (may differ from `config.threshold` after a sweep).
    thresholds: Vec<f32>,
    pruned: Vec<bool>,
    tensors: BTreeMap<String, TensorBlob>,
}

fn encode(m: &Matrix) -> TensorBlob {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorBlob {
        rows: m.rows(),
        cols: m.cols(),
        data: STANDARD.encode(bytes),
    }
}

fn decode(name: &str, blob: &TensorBlob) -> Result<Matrix> {
    let bytes = STANDARD
        .decode(&blob.data)
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    if bytes.len() != blob.rows * blob.cols * 4 {
        return Err(Error::Checkpoint(format!(
            "{name}: {} bytes for a {}x{} tensor",
            bytes.len(),
            blob.rows,
            blob.cols
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(blob.rows, blob.cols, data)
}

/// Serializes the model to a JSON string.
pub fn to_json(model: &ToyModel) -> Result<String> {
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA,
        config: model.config.clone(),
        thresholds: model.layers().map(|l| l.threshold).collect(),
        pruned: model.layers().map(|l| l.is_pruned()).collect(),
        tensors: model
            .tensors()
            .into_iter()
            .map(|(name, m, _)| (name, encode(m)))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Rebuilds a model from [`to_json`] output. Every tensor must be present
/// with its expected shape; extra tensors are rejected.
pub fn from_json(text: &str) -> Result<ToyModel> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "schema version {} (expected {CHECKPOINT_SCHEMA})",
            file.schema_version
        )));
    }
    let layers = file.config.num_layers;
    if file.pruned.len() != layers || file.thresholds.len() != layers {
        return Err(Error::Checkpoint(format!(
            "{} pruned flags and {} thresholds for {layers} layers",
            file.pruned.len(),
            file.thresholds.len()
        )));
    }
    // Build the skeleton, then overwrite every tensor.
    let mut model = ToyModel::new(file.config.clone(), &mut Rng::new(0))?;
    for (block, (&pruned, &th)) in model.blocks.iter_mut().zip(file.pruned.iter().zip(&file.thresholds)) {
        if pruned {
            block.l2a.prune();
        }
        block.l2a.threshold = th;
    }
    let mut seen = 0;
    for (name, slot, _) in model.tensors_mut() {
        let blob = file
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let m = decode(&name, blob)?;
        if m.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        if !m.is_finite() {
            return Err(Error::Checkpoint(format!("{name}: non-finite values")));
        }
        *slot = m;
        seen += 1;
    }
    if seen != file.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in file, {seen} expected",
            file.tensors.len()
        )));
    }
    Ok(model)
}

pub fn save(model: &ToyModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyModel> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = ToyModel::new(ModelConfig::default(), &mut Rng::new(7)).unwrap();
        model.blocks[0].l2a.router.w.set(0, 3, -0.125);
        model.blocks[1].l2a.prune();
        model.blocks[1].l2a.threshold = 0.75;
        let back = from_json(&to_json(&model).unwrap()).unwrap();
        assert_eq!(back, model);
        for ((_, a, _), (_, b, _)) in model.tensors().into_iter().zip(back.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn rejects_bad_files() {
        let model = ToyModel::new(ModelConfig::default(), &mut Rng::new(1)).unwrap();
        let json = to_json(&model).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["schema_version"] = 99.into();
        assert!(from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["tensors"].as_object_mut().unwrap().remove("unembed");
        assert!(from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["tensors"]["embed"]["rows"] = 3.into();
        assert!(from_json(&v.to_string()).is_err());
    }
}
