//! Binary embedding files.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                         |
//! |-------|-----------------------------------------------|
//! | 4     | magic `DREC`                                  |
//! | 4     | version, u32 = 1                              |
//! | 1     | kind: 0 collaborative, 1 textual, 2 per-user  |
//! | 8     | count, u64                                    |
//! | 4     | dim, u32                                      |
//! | 8·count | user keys, u64 (kind 2 only)                |
//! | 4·count·dim | f32 rows, row-major                   |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RetrievalError;

const MAGIC: &[u8; 4] = b"DREC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Collaborative,
    Textual,
    UserVectors,
}

impl EmbeddingKind {
    fn code(self) -> u8 {
        match self {
            EmbeddingKind::Collaborative => 0,
            EmbeddingKind::Textual => 1,
            EmbeddingKind::UserVectors => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EmbeddingKind::Collaborative),
            1 => Some(EmbeddingKind::Textual),
            2 => Some(EmbeddingKind::UserVectors),
            _ => None,
        }
    }
}

/// Row-major `rows × dim` matrix of finite `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    kind: EmbeddingKind,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(kind: EmbeddingKind, dim: usize, data: Vec<f32>) -> Result<Self, RetrievalError> {
        if dim == 0 {
            return Err(RetrievalError::Format("dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(RetrievalError::Format(format!(
                "{} values do not divide into rows of {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite { row: pos / dim });
        }
        Ok(EmbeddingMatrix { kind, dim, data })
    }

    pub fn from_rows(kind: EmbeddingKind, rows: &[Vec<f32>]) -> Result<Self, RetrievalError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(RetrievalError::DimMismatch {
                expected: dim,
                found: rows[bad].len(),
            });
        }
        Self::new(kind, dim, rows.concat())
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self.kind, self.rows(), self.dim, None, &self.data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let (kind, count, dim, body) = decode_header(bytes)?;
        if kind == EmbeddingKind::UserVectors {
            return Err(RetrievalError::Format("per-user vector file where item embeddings expected".into()));
        }
        let data = decode_floats(body, count, dim)?;
        Self::new(kind, dim, data)
    }

    pub fn read(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = std::fs::read(path).map_err(|e| RetrievalError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), RetrievalError> {
        crate::io::write_atomic(path, &self.to_bytes()).map_err(|e| RetrievalError::Format(e.to_string()))
    }
}

/// Precomputed history encodings keyed by [`user_key`].
#[derive(Debug, Clone, PartialEq)]
pub struct UserVectors {
    keys: Vec<u64>,
    vectors: EmbeddingMatrix,
}

impl UserVectors {
    pub fn new(keys: Vec<u64>, vectors: EmbeddingMatrix) -> Result<Self, RetrievalError> {
        if keys.len() != vectors.rows() {
            return Err(RetrievalError::RowCount {
                expected: keys.len(),
                found: vectors.rows(),
            });
        }
        Ok(UserVectors {
            keys,
            vectors: EmbeddingMatrix {
                kind: EmbeddingKind::UserVectors,
                ..vectors
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn get(&self, user_id: &str) -> Option<&[f32]> {
        let key = user_key(user_id);
        self.keys.iter().position(|&k| k == key).map(|i| self.vectors.row(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(
            EmbeddingKind::UserVectors,
            self.keys.len(),
            self.vectors.dim(),
            Some(&self.keys),
            self.vectors.as_slice(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let (kind, count, dim, body) = decode_header(bytes)?;
        if kind != EmbeddingKind::UserVectors {
            return Err(RetrievalError::Format(format!("expected per-user vectors, found {kind:?}")));
        }
        let key_bytes = count
            .checked_mul(8)
            .filter(|&n| n <= body.len())
            .ok_or_else(|| RetrievalError::Format("truncated user-key table".into()))?;
        let keys = body[..key_bytes]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = decode_floats(&body[key_bytes..], count, dim)?;
        Self::new(keys, EmbeddingMatrix::new(EmbeddingKind::UserVectors, dim, data)?)
    }

    pub fn read(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = std::fs::read(path).map_err(|e| RetrievalError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// 64-bit FNV-1a of the user id; the key stored in per-user vector files.
pub fn user_key(user_id: &str) -> u64 {
    fnv1a(user_id.as_bytes())
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn encode(kind: EmbeddingKind, count: usize, dim: usize, keys: Option<&[u64]>, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + keys.map_or(0, |k| k.len() * 8) + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind.code());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for k in keys.unwrap_or_default() {
        out.extend_from_slice(&k.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_header(bytes: &[u8]) -> Result<(EmbeddingKind, usize, usize, &[u8]), RetrievalError> {
    if bytes.len() < HEADER_LEN {
        return Err(RetrievalError::Format("file shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(RetrievalError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(RetrievalError::Format(format!("unsupported version {version}")));
    }
    let kind = EmbeddingKind::from_code(bytes[8])
        .ok_or_else(|| RetrievalError::Format(format!("unknown kind {}", bytes[8])))?;
    let count = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
    Ok((kind, count, dim, &bytes[HEADER_LEN..]))
}

fn decode_floats(body: &[u8], count: usize, dim: usize) -> Result<Vec<f32>, RetrievalError> {
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| RetrievalError::Format("row count overflows".into()))?;
    if body.len() != expected {
        return Err(RetrievalError::Format(format!(
            "expected {expected} payload bytes for {count}x{dim}, found {}",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
