//! Checkpoint file layout:
//!
//! ```text
//! magic        8 bytes  "PRMRSCKP"
//! header_len   u64 LE
//! header       TOML, header_len bytes
//! records      tensor_count × { name_len u32, name, rank u32, dims u64×rank, values f64 LE × numel }
//! ```
//!
//! Nothing may follow the last record.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::write_atomic;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRMRSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Completed training epochs.
    pub epoch: usize,
    pub tensor_count: usize,
    /// SHA-256 of the metrics file as it stood when the checkpoint was taken.
    pub metrics_sha256: String,
    pub input_height: usize,
    pub input_width: usize,
    pub class_names: Vec<String>,
    pub normalization: NormalizationStats,
    pub model: ModelConfig,
    pub training: Option<TrainConfig>,
}

/// Fields of the header that the caller supplies.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub metrics_sha256: String,
    pub input_height: usize,
    pub input_width: usize,
    pub class_names: Vec<String>,
    pub normalization: NormalizationStats,
    pub training: Option<TrainConfig>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let tensors = model.store().named_tensors();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        epoch: meta.epoch,
        tensor_count: tensors.len(),
        metrics_sha256: meta.metrics_sha256.clone(),
        input_height: meta.input_height,
        input_width: meta.input_width,
        class_names: meta.class_names.clone(),
        normalization: meta.normalization,
        model: model.config().clone(),
        training: meta.training.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| corrupt(format!("cannot encode header: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + text.len() + model.param_count() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    for (name, t) in &tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(format!("truncated: needed {n} bytes at offset {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| corrupt(format!("implausible length {v}")))
    }
}

/// Parses a checkpoint into its header and named tensors.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(corrupt(format!("{} is not a checkpoint", path.display())));
    }
    let header_len = r.u64()?;
    let header_len = r.len(header_len)?;
    let text = std::str::from_utf8(r.take(header_len)?).map_err(|_| corrupt("header is not UTF-8"))?;
    let version: toml::Table = toml::from_str(text).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    match version.get("format_version").and_then(toml::Value::as_integer) {
        Some(v) if v == CHECKPOINT_VERSION as i64 => {}
        other => {
            return Err(corrupt(format!(
                "format version mismatch: file has {other:?}, this build reads {CHECKPOINT_VERSION}"
            )))
        }
    }
    let header: CheckpointHeader = toml::from_str(text).map_err(|e| corrupt(format!("unreadable header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensor_count);
    for _ in 0..header.tensor_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflows"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("shape overflows"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::from_vec(&shape, data, false).map_err(|e| corrupt(e.to_string()))?;
        tensors.push((name.to_string(), t));
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok((header, tensors))
}

/// Overwrites the tensors of `model` with those stored at `path`. Every
/// stored name must exist in the model and every model tensor must be
/// stored.
pub fn load_checkpoint_into(model: &mut Model, path: &Path) -> Result<CheckpointHeader> {
    let (header, tensors) = read_checkpoint(path)?;
    assign_all(model, &tensors)?;
    Ok(header)
}

/// Rebuilds the model described by the checkpoint header and loads its
/// tensors.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let (header, tensors) = read_checkpoint(path)?;
    let mut model = build_model(&header.model, 0)?;
    assign_all(&mut model, &tensors)?;
    Ok((model, header))
}

fn assign_all(model: &mut Model, tensors: &[(String, Tensor)]) -> Result<()> {
    let store = model.store_mut();
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        store.assign(name, t).map_err(|e| match e {
            Error::Contract(m) => corrupt(m),
            other => other,
        })?;
        seen.insert(name.as_str());
    }
    if let Some((missing, _)) = store.named_tensors().into_iter().find(|(n, _)| !seen.contains(n.as_str())) {
        return Err(corrupt(format!("checkpoint lacks tensor `{missing}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            epoch: 2,
            metrics_sha256: "00".into(),
            input_height: 32,
            input_width: 32,
            class_names: (0..10).map(|k| k.to_string()).collect(),
            normalization: NormalizationStats { mean: [0.4, 0.5, 0.6], std: [0.2, 0.25, 0.3] },
            training: Some(TrainConfig::default()),
        }
    }

    fn small(variant: Variant) -> Model {
        let c = ModelConfig { variant, base_width: 2, permutation_head: true, ..ModelConfig::default() };
        build_model(&c, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = small(Variant::Improved);
        // move running statistics off their initial values
        let x = Tensor::from_vec(&[2, 3, 32, 32], (0..6144).map(|i| (i as f64 * 0.1).sin()).collect(), false).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let xv = tape.constant(&x);
        model.forward(&mut tape, xv, true).unwrap();

        save_checkpoint(&model, &meta(), &path).unwrap();
        let (mut loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header.epoch, 2);
        assert_eq!(header.normalization, meta().normalization);
        assert_eq!(header.training, Some(TrainConfig::default()));
        assert_eq!(loaded.store().named_tensors(), model.store().named_tensors());
        let a = model.infer(&x).unwrap();
        let b = loaded.infer(&x).unwrap();
        assert_eq!(a.class_logits.data(), b.class_logits.data());
        assert_eq!(a.perm_logits.unwrap().data(), b.perm_logits.unwrap().data());

        let path2 = dir.path().join("again.ckpt");
        save_checkpoint(&loaded, &meta(), &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&small(Variant::Baseline), &meta(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [1, 8, bytes.len() / 2, bytes.len() - 20] {
            fs::write(&path, &bytes[..bytes.len() - cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        fs::write(&path, &longer).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&small(Variant::Baseline), &meta(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
        assert!(text.starts_with("format_version = 1\n"));
        let mut edited = bytes.clone();
        edited[16 + "format_version = ".len()] = b'7';
        fs::write(&path, edited).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version mismatch"), "{err}");
    }

    #[test]
    fn mismatched_variant_reports_unknown_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&small(Variant::Improved), &meta(), &path).unwrap();
        let mut other = small(Variant::Baseline);
        let err = load_checkpoint_into(&mut other, &path).unwrap_err();
        assert!(err.to_string().contains("unknown tensor name"), "{err}");
    }
}
