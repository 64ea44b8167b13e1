//! Directory checkpoints: `manifest.json` plus one little-endian blob per
//! tensor, each guarded by a CRC32 recorded in the manifest.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{EpochLoss, Pass, TrainConfig};
use crate::bfnet::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::ClassSet;
use crate::netcore::{ParamRole, ParamSet, Tensor};
use crate::r2snet::{Model, ModelConfig};
use crate::scalar::{DType, Storable};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Group holding the model parameters; other groups carry optimizer state.
pub const PARAMS_GROUP: &str = "params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub file: String,
    pub crc32: u32,
}

/// Resume information for an interrupted training pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub pass: Pass,
    pub config: TrainConfig,
    pub adam_step: u64,
    pub best_epoch: usize,
    pub best_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub model: ModelConfig,
    pub classes: ClassSet,
    pub k: usize,
    pub grid: GridSpec,
    pub num_classes: usize,
    /// Completed epochs of the pass that produced the parameters.
    pub epoch: usize,
    pub losses: Vec<EpochLoss>,
    pub progress: Option<Progress>,
    /// Filled in on save; ignored when building a checkpoint in memory.
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub groups: IndexMap<String, ParamSet<T>>,
}

impl<T: Storable> Checkpoint<T> {
    /// Checkpoint of a model with no training history.
    pub fn from_model(model: &Model<T>) -> Self {
        let mut groups = IndexMap::new();
        groups.insert(PARAMS_GROUP.to_string(), model.params.clone());
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                dtype: T::DTYPE,
                model: model.config.clone(),
                classes: model.classes.clone(),
                k: model.k,
                grid: model.grid,
                num_classes: model.classes.len(),
                epoch: 0,
                losses: Vec::new(),
                progress: None,
                tensors: Vec::new(),
            },
            groups,
        }
    }

    pub fn params(&self) -> Result<&ParamSet<T>> {
        self.groups
            .get(PARAMS_GROUP)
            .ok_or_else(|| Error::Integrity("checkpoint has no parameter group".into()))
    }

    /// Rebuilds the model recorded in the manifest.
    pub fn model(&self) -> Result<Model<T>> {
        let m = &self.manifest;
        Model::with_params(m.model.clone(), m.classes.clone(), m.grid, m.k, self.params()?.clone())
    }

    /// Rejects a checkpoint whose `k`, grid or class set differ from the
    /// caller's configuration.
    pub fn check_compatible(&self, k: usize, grid: GridSpec, classes: &ClassSet) -> Result<()> {
        let m = &self.manifest;
        if m.k != k {
            return Err(Error::Config(format!(
                "checkpoint was trained with k={}, configuration asks for k={k}",
                m.k
            )));
        }
        if m.grid != grid {
            return Err(Error::Config(format!(
                "checkpoint grid is {}x{}, configuration asks for {}x{}",
                m.grid.width, m.grid.height, grid.width, grid.height
            )));
        }
        if &m.classes != classes {
            return Err(Error::Config(format!(
                "checkpoint classes {:?} (|O|={}) differ from configured {:?} (|O|={})",
                m.classes.names(),
                m.num_classes,
                classes.names(),
                classes.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        manifest.format_version = FORMAT_VERSION;
        manifest.dtype = T::DTYPE;
        manifest.tensors.clear();
        for (group, set) in &self.groups {
            for (i, (_, name, entry)) in set.iter().enumerate() {
                let mut bytes = Vec::with_capacity(entry.tensor.len() * T::DTYPE.size_of());
                for v in entry.tensor.data() {
                    v.write_le(&mut bytes);
                }
                let file = format!("{group}-{i:05}.bin");
                let path = dir.join(&file);
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                manifest.tensors.push(TensorRecord {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: entry.tensor.shape().to_vec(),
                    role: entry.role,
                    file,
                    crc32: crc32fast::hash(&bytes),
                });
            }
        }
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Integrity(format!("manifest encoding: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if manifest.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "checkpoint stores {:?} values, {:?} requested",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let width = T::DTYPE.size_of();
        let mut groups: IndexMap<String, ParamSet<T>> = IndexMap::new();
        for rec in &manifest.tensors {
            if rec.file.contains(['/', '\\']) || rec.file.starts_with('.') {
                return Err(Error::Integrity(format!("tensor file name {:?} escapes the checkpoint", rec.file)));
            }
            let path = dir.join(&rec.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let n: usize = rec.shape.iter().product();
            if bytes.len() != n * width {
                return Err(Error::Integrity(format!(
                    "{}/{}: expected {} bytes, found {}",
                    rec.group,
                    rec.name,
                    n * width,
                    bytes.len()
                )));
            }
            if crc32fast::hash(&bytes) != rec.crc32 {
                return Err(Error::Integrity(format!("{}/{}: checksum mismatch", rec.group, rec.name)));
            }
            let data = bytes.chunks_exact(width).map(T::read_le).collect();
            let tensor = Tensor::from_vec(&rec.shape, data)?;
            groups
                .entry(rec.group.clone())
                .or_insert_with(ParamSet::new)
                .insert(rec.name.clone(), tensor, rec.role)
                .map_err(|_| Error::Integrity(format!("duplicate tensor {}/{}", rec.group, rec.name)))?;
        }
        let ck = Checkpoint { manifest, groups };
        ck.params()?;
        Ok(ck)
    }
}

/// Reads and version-checks a manifest without touching the tensor blobs.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: unreadable manifest: {e}", path.display())))?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Integrity(format!(
            "{}: checkpoint format version {:?} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            version
        )));
    }
    serde_json::from_value(value).map_err(|e| Error::Integrity(format!("{}: invalid manifest: {e}", path.display())))
}
