//! Parameter checkpoints: a JSON manifest (`<stem>.json`) listing tensor names
//! and shapes in storage order, next to a blob (`<stem>.bin`) of little-endian
//! `f64` values in the same order. Files are written once and never replaced.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{MlpSpec, ParamSet, Tensor};

pub const FORMAT: &str = "crd-params";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: MlpSpec,
    pub dtype: String,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Writes `path` through a temporary sibling so readers never see a partial
/// file. Refuses to replace an existing file.
pub(crate) fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.exists() {
        return Err(Error::Checkpoint {
            path: path.into(),
            reason: "already exists; checkpoints are immutable".into(),
        });
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn write_params(stem: &Path, params: &ParamSet) -> Result<()> {
    let blob = blob_path(stem);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        spec: params.spec().clone(),
        dtype: "f64-le".into(),
        blob: blob
            .file_name()
            .expect("stem has a file name")
            .to_string_lossy()
            .into_owned(),
        tensors: params
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(8 * params.num_params());
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_new(&blob, &bytes)?;
    write_new(&manifest_path(stem), text.as_bytes())
}

/// Reads a checkpoint given its stem or its manifest path.
pub fn read_params(path: &Path) -> Result<ParamSet> {
    let manifest_file = if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        manifest_path(path)
    };
    let bad = |reason: String| Error::Checkpoint {
        path: manifest_file.clone(),
        reason,
    };
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION || manifest.dtype != "f64-le" {
        return Err(bad(format!(
            "unsupported format {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    let blob_file = manifest_file.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != 8 * expected {
        return Err(bad(format!(
            "blob holds {} bytes, manifest needs {}",
            bytes.len(),
            8 * expected
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = manifest
        .tensors
        .iter()
        .map(|t| Tensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: values.by_ref().take(t.shape.iter().product()).collect(),
        })
        .collect();
    ParamSet::from_tensors(&manifest.spec, tensors).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    fn params() -> ParamSet {
        let spec = MlpSpec {
            data_dim: 2,
            time_embed_dim: 4,
            num_prompts: 3,
            hidden: vec![5, 7],
            activation: Activation::Silu,
        };
        let mut p = ParamSet::init(&spec, 1);
        p.set_flat(0, f64::MIN_POSITIVE);
        p.set_flat(1, -0.0);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("theta");
        let p = params();
        write_params(&stem, &p).unwrap();
        assert!(read_params(&stem).unwrap().bit_eq(&p));
        assert!(read_params(&manifest_path(&stem)).unwrap().bit_eq(&p));
    }

    #[test]
    fn existing_checkpoints_are_not_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("theta");
        write_params(&stem, &params()).unwrap();
        let err = write_params(&stem, &params()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("theta");
        write_params(&stem, &params()).unwrap();
        let blob = blob_path(&stem);
        let bytes = fs::read(&blob).unwrap();
        fs::remove_file(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_params(&stem).is_err());
    }
}
