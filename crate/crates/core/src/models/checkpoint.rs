//! Checkpoint container: `u64` LE header length, the JSON header, then every
//! parameter as little-endian `f64` in header order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig, ModelError, RankingModel};
use crate::datasets::Task;
use crate::scalar::Scalar;

const FORMAT: &str = "seqmd-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: ModelConfig,
    pub seed: u64,
    /// Seeds of every model whose weights flowed into this one, oldest first.
    pub seed_lineage: Vec<u64>,
    pub params: Vec<ParamEntry>,
}

pub fn checkpoint_save<S: Scalar>(
    model: &(impl RankingModel<S> + ?Sized),
    path: &Path,
) -> Result<(), ModelError> {
    checkpoint_save_with_lineage(model, path, &[])
}

/// Like [`checkpoint_save`], recording `ancestors` ahead of the model's seed.
pub fn checkpoint_save_with_lineage<S: Scalar>(
    model: &(impl RankingModel<S> + ?Sized),
    path: &Path,
    ancestors: &[u64],
) -> Result<(), ModelError> {
    let mut params = Vec::new();
    let mut payload = Vec::new();
    model.visit_params(&mut |p| {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    });
    let mut seed_lineage = ancestors.to_vec();
    seed_lineage.push(model.seed());
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        architecture: model.config(),
        seed: model.seed(),
        seed_lineage,
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read, file_len: u64) -> Result<CheckpointHeader, ModelError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| ModelError::Checkpoint("file too short for a header".into()))?;
    let len = u64::from_le_bytes(len);
    if len > file_len.saturating_sub(8) {
        return Err(ModelError::Checkpoint(format!(
            "header length {len} exceeds file size {file_len}"
        )));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    let header: CheckpointHeader = serde_json::from_slice(&buf)
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported container {} v{}",
            header.format, header.version
        )));
    }
    Ok(header)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    read_header(&mut BufReader::new(f), len)
}

fn read_payload(
    r: &mut impl Read,
    header: &CheckpointHeader,
) -> Result<HashMap<String, (Vec<usize>, Vec<f64>)>, ModelError> {
    let mut out = HashMap::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| ModelError::CheckpointParam {
            name: p.name.clone(),
            detail: "payload truncated".into(),
        })?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::CheckpointParam {
                name: p.name.clone(),
                detail: "non-finite value".into(),
            });
        }
        if out.insert(p.name.clone(), (p.shape.clone(), values)).is_some() {
            return Err(ModelError::CheckpointParam {
                name: p.name.clone(),
                detail: "duplicate name".into(),
            });
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(out)
}

/// Tasks in `target` that are absent from `source`, provided `source`
/// keeps its relative order inside `target`.
fn added_tasks(source: &[Task], target: &[Task]) -> Option<Vec<Task>> {
    let mut it = target.iter();
    for s in source {
        it.find(|t| *t == s)?;
    }
    Some(target.iter().filter(|t| !source.contains(t)).copied().collect())
}

fn owned_by(name: &str, tasks: &[Task]) -> bool {
    let component = name.split('/').next().unwrap_or(name);
    component
        .split('.')
        .any(|part| tasks.iter().any(|t| t.as_str() == part))
}

/// Loads a checkpoint into a model built from `target`.
///
/// With `target` equal to the stored architecture every parameter is
/// copied. If `target` only adds tasks, parameters shared by name are
/// copied and the new tasks' components start fresh from `seed`.
pub fn checkpoint_load<S: Scalar>(
    path: &Path,
    target: &ModelConfig,
    seed: u64,
) -> Result<Box<dyn RankingModel<S>>, ModelError> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    let mut r = BufReader::new(f);
    let header = read_header(&mut r, len)?;
    let mut stored = read_payload(&mut r, &header)?;

    let source = &header.architecture;
    let (new_tasks, seed) = if source == target {
        (Vec::new(), header.seed)
    } else {
        let same_shape = target.with_tasks(source.tasks().to_vec()) == *source;
        match added_tasks(source.tasks(), target.tasks()) {
            Some(added) if same_shape && !added.is_empty() => (added, seed),
            _ => {
                return Err(ModelError::Checkpoint(format!(
                    "checkpoint holds {} over {:?}; target {} over {:?} is not the same model or a task extension of it",
                    source.label(),
                    source.tasks(),
                    target.label(),
                    target.tasks()
                )))
            }
        }
    };

    let mut model = build_model::<S>(target, seed)?;
    let mut err = None;
    model.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match stored.remove(&p.name) {
            Some((shape, values)) => {
                if shape != p.value.shape() {
                    err = Some(ModelError::CheckpointParam {
                        name: p.name.clone(),
                        detail: format!("shape {shape:?} in checkpoint, model expects {:?}", p.value.shape()),
                    });
                    return;
                }
                for (dst, v) in p.value.data_mut().iter_mut().zip(values) {
                    *dst = S::of(v);
                }
            }
            None if owned_by(&p.name, &new_tasks) => {}
            None => {
                err = Some(ModelError::CheckpointParam {
                    name: p.name.clone(),
                    detail: "missing from checkpoint".into(),
                })
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = header
        .params
        .iter()
        .map(|p| &p.name)
        .find(|n| stored.contains_key(*n))
    {
        return Err(ModelError::CheckpointParam {
            name: name.clone(),
            detail: "unknown parameter name for the target model".into(),
        });
    }
    Ok(model)
}
