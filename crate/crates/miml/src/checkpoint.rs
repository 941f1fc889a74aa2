//! Binary checkpoints: magic, version, JSON metadata, then little-endian
//! `f32` tensor data in metadata order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use miml_core::nn::{AdamW, ParamSet};
use miml_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MIMLCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Checkpoint every this many steps during CLI training.
pub const CADENCE: u64 = 1000;
/// Rotating checkpoints kept per run.
pub const KEEP_LAST: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Model configuration, see [`crate::models::ModelSpec`].
    pub model: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Optimizer step count when moment estimates follow the parameters.
    #[serde(default)]
    pub optimizer_step: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub params: ParamSet<f32>,
    pub optimizer: Option<(u64, Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.into(), message: message.into() }
}

pub fn save(path: &Path, model: serde_json::Value, step: u64, params: &ParamSet<f32>, optimizer: Option<&AdamW<f32>>) -> Result<()> {
    let tensors = params.iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect();
    let meta = Metadata { model, step, tensors, optimizer_step: optimizer.map(|o| o.step) };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::with_capacity(json.len() + 4 * params.num_scalars() * if optimizer.is_some() { 3 } else { 1 } + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |t: &Tensor<f32>| t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    params.iter().for_each(|p| put(&p.value));
    if let Some(o) = optimizer {
        o.first.iter().for_each(&mut put);
        o.second.iter().for_each(&mut put);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| bad(path, e.to_string()))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad(path, "truncated metadata"))?;
    let metadata: Metadata = serde_json::from_slice(json).map_err(|e| bad(path, format!("bad metadata: {e}")))?;
    let mut floats = bytes[20 + len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad(path, "truncated tensor data"));
        }
        Ok(Tensor::from_vec(shape, data))
    };
    let mut params = ParamSet::new();
    for t in &metadata.tensors {
        let value = take(&t.shape)?;
        params.add(&t.name, value);
    }
    let optimizer = match metadata.optimizer_step {
        Some(step) => {
            let first = metadata.tensors.iter().map(|t| take(&t.shape)).collect::<Result<Vec<_>>>()?;
            let second = metadata.tensors.iter().map(|t| take(&t.shape)).collect::<Result<Vec<_>>>()?;
            Some((step, first, second))
        }
        None => None,
    };
    if floats.next().is_some() {
        return Err(bad(path, "trailing data"));
    }
    Ok(Checkpoint { metadata, params, optimizer })
}

/// Copies checkpoint values into `target`, requiring identical names and shapes.
pub fn restore_params(path: &Path, source: &ParamSet<f32>, target: &mut ParamSet<f32>) -> Result<()> {
    if source.len() != target.len() {
        return Err(bad(path, format!("{} tensors in checkpoint, model has {}", source.len(), target.len())));
    }
    for (s, t) in source.iter().zip(target.iter_mut()) {
        if s.name != t.name || s.value.shape() != t.value.shape() {
            return Err(bad(path, format!("tensor `{}` {:?} does not match model `{}` {:?}", s.name, s.value.shape(), t.name, t.value.shape())));
        }
        t.value = s.value.clone();
    }
    Ok(())
}

/// `<dir>/<prefix>-<step>.ckpt`, deleting all but the newest `KEEP_LAST`.
pub fn save_rotating(dir: &Path, prefix: &str, model: serde_json::Value, step: u64, params: &ParamSet<f32>, optimizer: &AdamW<f32>) -> Result<PathBuf> {
    let path = dir.join(format!("{prefix}-{step:08}.ckpt"));
    save(&path, model, step, params, Some(optimizer))?;
    let mut existing = rotating(dir, prefix)?;
    while existing.len() > KEEP_LAST {
        let old = existing.remove(0);
        fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(path)
}

/// Rotating checkpoints of `prefix` in `dir`, oldest first.
pub fn rotating(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix(prefix)?.strip_prefix('-')?.strip_suffix(".ckpt"))
                .is_some_and(|s| s.len() == 8 && s.bytes().all(|b| b.is_ascii_digit()))
        })
        .collect();
    out.sort();
    Ok(out)
}
