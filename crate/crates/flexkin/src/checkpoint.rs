//! Checkpoints: a JSON manifest (config, seed, topology, parameter names and
//! shapes in order) next to a flat little-endian float64 blob holding the
//! parameter values in manifest order. `save(prefix)` writes `prefix.json`
//! and `prefix.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::net::{FlexModel, FusionConfig};
use crate::skeleton::SkeletonTopology;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub topology: serde_json::Value,
    pub params: Vec<ParamMeta>,
}

pub fn manifest_file(prefix: &Path) -> PathBuf {
    with_extension(prefix, "json")
}

pub fn values_file(prefix: &Path) -> PathBuf {
    with_extension(prefix, "bin")
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut os = prefix.as_os_str().to_owned();
    os.push(".");
    os.push(ext);
    PathBuf::from(os)
}

pub fn save(prefix: &Path, model: &FlexModel) -> Result<()> {
    let manifest = CheckpointManifest {
        format: 1,
        seed: model.seed,
        fusion: model.config.clone(),
        topology: model.topology.to_value(),
        params: model
            .params
            .iter()
            .map(|p| ParamMeta { name: p.name.clone(), shape: p.shape.clone() })
            .collect(),
    };
    fs::write(manifest_file(prefix), serde_json::to_string_pretty(&manifest)?)?;
    let mut blob = Vec::with_capacity(model.params.total_values() * 8);
    for p in model.params.iter() {
        for v in &p.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(values_file(prefix), blob)?;
    Ok(())
}

pub fn load(prefix: &Path) -> Result<FlexModel> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(manifest_file(prefix))?)?;
    if manifest.format != 1 {
        return Err(FlexError::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let topology = SkeletonTopology::from_value(&manifest.topology)?;
    let mut model = FlexModel::new(manifest.fusion, topology, manifest.seed)?;
    if model.params.len() != manifest.params.len() {
        return Err(FlexError::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for (i, meta) in manifest.params.iter().enumerate() {
        let p = model.params.param(i);
        if p.name != meta.name || p.shape != meta.shape {
            return Err(FlexError::Checkpoint(format!(
                "parameter {i} mismatch: manifest {}/{:?}, model {}/{:?}",
                meta.name, meta.shape, p.name, p.shape
            )));
        }
    }
    let blob = fs::read(values_file(prefix))?;
    if blob.len() != model.params.total_values() * 8 {
        return Err(FlexError::Checkpoint(format!(
            "blob holds {} bytes, expected {}",
            blob.len(),
            model.params.total_values() * 8
        )));
    }
    let mut offset = 0;
    for i in 0..model.params.len() {
        let values = model.params.values_mut(i);
        for v in values.iter_mut() {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&blob[offset..offset + 8]);
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
    }
    Ok(model)
}
