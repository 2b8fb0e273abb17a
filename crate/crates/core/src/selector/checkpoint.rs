//! Checkpoint directories: `manifest.json` describing the configuration,
//! group flags and tensor layout, plus `tensors.bin` holding every tensor as
//! little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroupName, NamedTensor, ParamGroup, SelectorConfig, SelectorParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: SelectorConfig,
    groups: Vec<GroupEntry>,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    name: GroupName,
    trainable: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, in `f64` elements.
    offset: usize,
}

pub fn save_checkpoint(params: &SelectorParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.num_parameters() * 8);
    let mut offset = 0;
    let groups = params
        .groups()
        .iter()
        .map(|g| GroupEntry {
            name: g.name,
            trainable: g.trainable,
            tensors: g
                .tensors
                .iter()
                .map(|t| {
                    for v in t.value.as_slice() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                    let entry = TensorEntry {
                        name: t.name.clone(),
                        rows: t.value.rows(),
                        cols: t.value.cols(),
                        offset,
                    };
                    offset += t.value.len();
                    entry
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: params.config().clone(),
        groups,
    };
    fs::write(dir.join(BLOB), blob)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<SelectorParams> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::validation(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(BLOB))?;
    if blob.len() % 8 != 0 {
        return Err(Error::validation("tensor blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut groups = Vec::with_capacity(manifest.groups.len());
    for g in manifest.groups {
        let mut tensors = Vec::with_capacity(g.tensors.len());
        for t in g.tensors {
            let end = t.offset + t.rows * t.cols;
            let slice = values
                .get(t.offset..end)
                .ok_or_else(|| Error::validation(format!("tensor `{}` extends past the blob", t.name)))?;
            tensors.push(NamedTensor {
                name: t.name,
                value: Matrix::from_vec(t.rows, t.cols, slice.to_vec()),
            });
        }
        groups.push(ParamGroup {
            name: g.name,
            trainable: g.trainable,
            tensors,
        });
    }
    SelectorParams::from_parts(manifest.config, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::init_params;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = SelectorConfig::compact(8, 8, 16);
        let params = init_params(&cfg, 42)
            .unwrap()
            .set_trainable([("rank_head", false)])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let params = init_params(&SelectorConfig::compact(4, 4, 4), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, dir.path()).unwrap();
        let blob = fs::read(dir.path().join(BLOB)).unwrap();
        fs::write(dir.path().join(BLOB), &blob[..blob.len() - 16]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
