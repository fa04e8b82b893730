//! JSON checkpoints: model metadata plus every named parameter and buffer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{Slot, Stateful};
use super::model::{DepthModel, NetworkConfig, Variant};
use crate::error::{Error, Result};
use crate::filtering::ThresholdParams;

const FORMAT: &str = "radar-depth-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub network: NetworkConfig,
    pub filter: ThresholdParams,
    /// Epochs completed.
    pub epoch: usize,
    pub step: usize,
    pub best_val_mae: Option<f64>,
    /// Caller-defined state (training config, history).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Array {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    meta: CheckpointMeta,
    params: BTreeMap<String, Array>,
    #[serde(default)]
    velocity: BTreeMap<String, Array>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes `model` and `meta`; momentum buffers are included when
/// `with_velocity` so a run can resume exactly.
pub fn save_checkpoint(path: &Path, model: &mut DepthModel, meta: &CheckpointMeta, with_velocity: bool) -> Result<()> {
    let mut slots = Vec::new();
    model.slots("", &mut slots);
    let mut params = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    for (name, slot) in slots {
        match slot {
            Slot::Param(p) => {
                if with_velocity {
                    velocity.insert(
                        name.clone(),
                        Array {
                            shape: p.shape.clone(),
                            data: p.velocity.clone(),
                        },
                    );
                }
                params.insert(
                    name,
                    Array {
                        shape: p.shape.clone(),
                        data: p.value.clone(),
                    },
                );
            }
            Slot::Buffer(b) => {
                params.insert(
                    name,
                    Array {
                        shape: b.shape.clone(),
                        data: b.value.clone(),
                    },
                );
            }
        }
    }
    let file = File {
        format: FORMAT.into(),
        meta: meta.clone(),
        params,
        velocity,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string(&file)?;
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<File> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: File = serde_json::from_str(&text).map_err(|e| ckpt_err(path, e))?;
    if file.format != FORMAT {
        return Err(ckpt_err(path, format!("unsupported format {:?}", file.format)));
    }
    Ok(file)
}

/// Reads only the metadata.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_file(path)?.meta)
}

/// Rebuilds the model described by the checkpoint and loads all state.
/// Every parameter must be present with a matching shape.
pub fn load_checkpoint(path: &Path) -> Result<(DepthModel, CheckpointMeta)> {
    let file = read_file(path)?;
    let meta = file.meta;
    let mut model = DepthModel::new(meta.variant, &meta.network, meta.filter)?;
    let mut slots = Vec::new();
    model.slots("", &mut slots);
    if slots.len() != file.params.len() {
        return Err(ckpt_err(
            path,
            format!("expected {} arrays for {}, found {}", slots.len(), meta.variant.label(), file.params.len()),
        ));
    }
    for (name, slot) in slots {
        let arr = file.params.get(&name).ok_or_else(|| ckpt_err(path, format!("missing array {name}")))?;
        let vel = file.velocity.get(&name);
        fill(path, &name, slot, arr, vel)?;
    }
    Ok((model, meta))
}

fn fill(path: &Path, name: &str, slot: Slot<'_>, arr: &Array, vel: Option<&Array>) -> Result<()> {
    let (shape, value) = match slot {
        Slot::Param(p) => {
            if let Some(v) = vel {
                if v.shape == p.shape && v.data.len() == p.len() {
                    p.velocity.copy_from_slice(&v.data);
                }
            }
            (&p.shape, &mut p.value)
        }
        Slot::Buffer(b) => (&b.shape, &mut b.value),
    };
    if &arr.shape != shape || arr.data.len() != value.len() {
        return Err(ckpt_err(
            path,
            format!("array {name} has shape {:?}, model expects {:?}", arr.shape, shape),
        ));
    }
    value.copy_from_slice(&arr.data);
    Ok(())
}

/// Outcome of [`load_pretrained`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainedReport {
    pub loaded: usize,
    pub missing: Vec<String>,
}

/// Copies every array whose name exists in both the file and `model`.
/// Names absent from the file are left at their initial values; a shared
/// name with a different shape is an error.
pub fn load_pretrained(model: &mut DepthModel, path: &Path) -> Result<PretrainedReport> {
    let file = read_file(path)?;
    let mut slots = Vec::new();
    model.slots("", &mut slots);
    let mut report = PretrainedReport::default();
    for (name, slot) in slots {
        match file.params.get(&name) {
            Some(arr) => {
                fill(path, &name, slot, arr, None)?;
                report.loaded += 1;
            }
            None => report.missing.push(name),
        }
    }
    Ok(report)
}
