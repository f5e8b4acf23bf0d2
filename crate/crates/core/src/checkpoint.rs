//! Parameter archives: named little-endian float blobs plus string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use autograd::{Array, ParamSet};
use ndarray::IxDyn;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

/// Blob precision on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Writes `params` to `path`. Keys are the parameter names.
pub fn write_archive(
    path: &Path,
    params: &ParamSet,
    metadata: &BTreeMap<String, String>,
    precision: Precision,
) -> Result<()> {
    let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|(name, value)| {
            let bytes = match precision {
                Precision::F32 => value.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
                Precision::F64 => value.iter().flat_map(|&v| v.to_le_bytes()).collect(),
            };
            (name.clone(), value.shape().to_vec(), bytes)
        })
        .collect();
    let dtype = match precision {
        Precision::F32 => Dtype::F32,
        Precision::F64 => Dtype::F64,
    };
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    safetensors::serialize_to_file(views, Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads an archive written by [`write_archive`]; values are widened to f64.
pub fn read_archive(path: &Path) -> Result<(ParamSet, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
    let metadata = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let archive = SafeTensors::deserialize(&bytes).map_err(bad)?;
    let mut params = ParamSet::new();
    for (name, view) in archive.iter() {
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other}"))),
        };
        let array = Array::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.insert(name, array);
    }
    Ok((params, metadata))
}

/// Copies every entry of `params` into `into` under `prefix.`.
pub fn merge_prefixed(into: &mut ParamSet, prefix: &str, params: &ParamSet) {
    for (name, value) in params.iter() {
        into.insert(format!("{prefix}.{name}"), value.clone());
    }
}

/// Entries of `params` under `prefix.`, with the prefix stripped.
pub fn take_prefixed(params: &ParamSet, prefix: &str) -> ParamSet {
    let head = format!("{prefix}.");
    let mut out = ParamSet::new();
    for (name, value) in params.iter() {
        if let Some(rest) = name.strip_prefix(&head) {
            out.insert(rest, value.clone());
        }
    }
    out
}

/// Fails unless `loaded` has exactly the names and shapes of `expected`.
pub fn check_layout(expected: &ParamSet, loaded: &ParamSet, what: &str) -> Result<()> {
    for (name, value) in expected.iter() {
        match loaded.get(name) {
            None => return Err(Error::Checkpoint(format!("{what}: missing tensor {name}"))),
            Some(v) if v.shape() != value.shape() => {
                return Err(Error::Checkpoint(format!(
                    "{what}: tensor {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = loaded.names().find(|n| expected.get(n).is_none()) {
        return Err(Error::Checkpoint(format!("{what}: unexpected tensor {extra}")));
    }
    Ok(())
}

pub(crate) fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("{}: metadata key {key} missing", path.display())))
}
