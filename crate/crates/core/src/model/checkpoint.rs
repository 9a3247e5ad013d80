//! Checkpoints: one tensor file per parameter and buffer plus `manifest.json`.
//! Contents depend only on model state, so identical runs give identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TnoConfig, TnoModel};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, DType, Scalar, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: TnoConfig,
    pub dtype: String,
    pub epoch: usize,
    pub parameters: Vec<TensorEntry>,
    /// Batch-norm running mean and variance, stored in double precision.
    pub buffers: Vec<TensorEntry>,
    /// Directory of normalisation tensors, if any.
    pub normalization: Option<String>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: TnoModel<T>,
    pub epoch: usize,
    pub norm: Option<NormStats>,
}

fn file_name(name: &str) -> String {
    format!("{name}.tnot")
}

/// Writes `model` under `dir`, replacing an existing checkpoint there.
pub fn save_checkpoint<T: Scalar>(
    model: &TnoModel<T>,
    epoch: usize,
    norm: Option<&NormStats>,
    dir: impl AsRef<Path>,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("buffers"))?;
    let mut parameters = Vec::with_capacity(model.params.len());
    for (name, t) in model.names.iter().zip(&model.params) {
        let file = format!("params/{}", file_name(name));
        write_tensor_file(t, dir.join(&file))?;
        parameters.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let mut buffers = Vec::with_capacity(2 * model.bn.len());
    for b in &model.bn {
        for (suffix, data) in [("running_mean", &b.running_mean), ("running_var", &b.running_var)] {
            let name = format!("{}.{suffix}", b.name);
            let file = format!("buffers/{}", file_name(&name));
            let t = Tensor::new(&[data.len()], data.clone())?;
            write_tensor_file(&t, dir.join(&file))?;
            buffers.push(TensorEntry {
                name,
                shape: vec![data.len()],
                file,
            });
        }
    }
    let normalization = match norm {
        Some(n) => {
            crate::data::write_norm_dir(&dir.join("norm"), n)?;
            Some("norm".to_string())
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config.clone(),
        dtype: match T::DTYPE {
            DType::F32 => "f32".into(),
            DType::F64 => "f64".into(),
        },
        epoch,
        parameters,
        buffers,
        normalization,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint, rebuilding the architecture from its stored config and
/// checking every tensor against it.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {} is not supported",
            manifest.format_version
        )));
    }
    let mut model = TnoModel::<T>::new(manifest.config.clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("stored config is invalid: {e}")))?;
    if manifest.parameters.len() != model.params.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected {} parameter tensors, manifest lists {}",
            model.params.len(),
            manifest.parameters.len()
        )));
    }
    for (i, entry) in manifest.parameters.iter().enumerate() {
        if entry.name != model.names[i] {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter {i} is {} in the checkpoint, {} in the model",
                entry.name, model.names[i]
            )));
        }
        let t: Tensor<T> = read_tensor_file(dir.join(&entry.file))?.into_dtype();
        if t.shape() != model.params[i].shape() || entry.shape != t.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                entry.name,
                t.shape(),
                model.params[i].shape()
            )));
        }
        model.params[i] = t;
    }
    if manifest.buffers.len() != 2 * model.bn.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected {} batch-norm buffers, manifest lists {}",
            2 * model.bn.len(),
            manifest.buffers.len()
        )));
    }
    for (b, pair) in model.bn.iter_mut().zip(manifest.buffers.chunks(2)) {
        for (entry, slot) in pair.iter().zip([&mut b.running_mean, &mut b.running_var]) {
            let t: Tensor<f64> = read_tensor_file(dir.join(&entry.file))?.into_dtype();
            if t.numel() != slot.len() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "buffer {} has {} values, expected {}",
                    entry.name,
                    t.numel(),
                    slot.len()
                )));
            }
            *slot = t.into_data();
        }
    }
    let norm = match &manifest.normalization {
        Some(rel) => Some(crate::data::read_norm_dir(&dir.join(rel))?),
        None => None,
    };
    Ok(Checkpoint {
        model,
        epoch: manifest.epoch,
        norm,
    })
}
