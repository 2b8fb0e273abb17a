//! Dataset and embedding files.
//!
//! Embedding file layout (all integers little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 8    | magic `FOEMB1\0\0`                     |
//! | 8      | 4    | `u32` row count N                      |
//! | 12     | 4    | `u32` column count D                   |
//! | 16     | 1    | dtype: 0 = `f32`, 1 = `f64`            |
//! | 17     | 7    | zero padding                           |
//! | 24     | N·D·size | row-major payload, little-endian  |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::types::AnnotatedExample;

pub const EMBEDDING_MAGIC: [u8; 8] = *b"FOEMB1\0\0";
pub const EMBEDDING_HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingDtype {
    F32,
    F64,
}

impl EmbeddingDtype {
    fn code(self) -> u8 {
        match self {
            EmbeddingDtype::F32 => 0,
            EmbeddingDtype::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            EmbeddingDtype::F32 => 4,
            EmbeddingDtype::F64 => 8,
        }
    }
}

pub fn encode_embeddings(m: &Matrix, dtype: EmbeddingDtype) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::validation("too many rows"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::validation("too many columns"))?;
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + m.len() * dtype.size());
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&[0; 7]);
    for &v in m.as_slice() {
        match dtype {
            EmbeddingDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            EmbeddingDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < EMBEDDING_HEADER_LEN || bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::validation("not an embedding file (bad magic)"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let dtype = match bytes[16] {
        0 => EmbeddingDtype::F32,
        1 => EmbeddingDtype::F64,
        other => return Err(Error::validation(format!("unknown embedding dtype code {other}"))),
    };
    let payload = &bytes[EMBEDDING_HEADER_LEN..];
    let expected = rows * cols * dtype.size();
    if payload.len() != expected {
        return Err(Error::validation(format!(
            "embedding payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = match dtype {
        EmbeddingDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        EmbeddingDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_embeddings(path: &Path, m: &Matrix, dtype: EmbeddingDtype) -> Result<()> {
    fs::write(path, encode_embeddings(m, dtype)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    decode_embeddings(&fs::read(path)?)
}

fn checked(records: Vec<AnnotatedExample>) -> Result<Vec<AnnotatedExample>> {
    for r in &records {
        let v = r.violations();
        if !v.is_empty() {
            return Err(Error::validation(format!("record {}: {}", r.id, v.join("; "))));
        }
    }
    Ok(records)
}

/// A JSON array, a single JSON object, or JSON lines. Every record is
/// validated.
pub fn parse_dataset(text: &str) -> Result<Vec<AnnotatedExample>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return checked(serde_json::from_str(trimmed)?);
    }
    if let Ok(one) = serde_json::from_str::<AnnotatedExample>(trimmed) {
        return checked(vec![one]);
    }
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::validation(format!("dataset line {}: {e}", i + 1))))
        .collect::<Result<Vec<_>>>()?;
    checked(records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<AnnotatedExample>> {
    parse_dataset(&fs::read_to_string(path)?)
}

/// Pretty-printed array with two-space indentation, keys in record order.
pub fn write_dataset_json(path: &Path, records: &[AnnotatedExample]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_dataset_jsonl(path: &Path, records: &[AnnotatedExample]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
