//! Versioned single-file checkpoints in the safetensors format.
//!
//! A checkpoint is a bag of named 4-D tensors plus string metadata. The
//! model layer decides what goes in; this module only guarantees that
//! values come back bit-identical and that files from another format or
//! version are rejected.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "memseg-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

const FORMAT_KEY: &str = "format";
const VERSION_KEY: &str = "version";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("metadata key {key:?} missing")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} missing")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = ckpt
        .tensors
        .iter()
        .map(|(name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta: HashMap<String, String> = ckpt.metadata.clone().into_iter().collect();
    meta.insert(FORMAT_KEY.into(), CHECKPOINT_FORMAT.into());
    meta.insert(VERSION_KEY.into(), CHECKPOINT_VERSION.into());
    let buf = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (metadata, raw) = read_safetensors(path)?;
    let format = metadata.get(FORMAT_KEY).map(String::as_str).unwrap_or("");
    let version = metadata.get(VERSION_KEY).map(String::as_str).unwrap_or("");
    if format != CHECKPOINT_FORMAT || version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedCheckpointVersion {
            found: format!("{format}/{version}"),
            expected: format!("{CHECKPOINT_FORMAT}/{CHECKPOINT_VERSION}"),
        });
    }
    let mut tensors = BTreeMap::new();
    for (name, (shape, data)) in raw {
        let shape: [usize; 4] = shape
            .try_into()
            .map_err(|s: Vec<usize>| Error::Checkpoint(format!("tensor {name} has rank {}", s.len())))?;
        tensors.insert(name, Tensor::from_vec(shape, data)?);
    }
    let metadata = metadata
        .into_iter()
        .filter(|(k, _)| k != FORMAT_KEY && k != VERSION_KEY)
        .collect();
    Ok(Checkpoint { metadata, tensors })
}

pub(crate) type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Read any safetensors file, widening `F32` and `F64` tensors to `f64`.
/// Tensors of other dtypes are skipped.
pub(crate) fn read_safetensors(path: &Path) -> Result<(BTreeMap<String, String>, RawTensors)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(bad)?;
    let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
    let st = SafeTensors::deserialize(&buf).map_err(bad)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            _ => continue,
        };
        out.insert(name, (view.shape().to_vec(), data));
    }
    Ok((metadata, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.metadata.insert("encoder".into(), "toy".into());
        c.tensors.insert(
            "a.weight".into(),
            Tensor::from_fn([2, 3, 1, 1], |[o, i, _, _]| (o as f64 + 0.1) / (i as f64 + 3.0)),
        );
        c.tensors.insert("b".into(), Tensor::scalar(f64::MIN_POSITIVE));
        c
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        let c = sample();
        save_checkpoint(&c, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }

    #[test]
    fn truncated_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        save_checkpoint(&sample(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn foreign_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("old.safetensors");
        let meta = HashMap::from([
            (FORMAT_KEY.to_string(), CHECKPOINT_FORMAT.to_string()),
            (VERSION_KEY.to_string(), "0".to_string()),
        ]);
        let empty: Vec<(&str, TensorView)> = Vec::new();
        std::fs::write(&p, safetensors::serialize(empty, &Some(meta)).unwrap()).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("unsupported checkpoint version"), "{err}");
    }
}
