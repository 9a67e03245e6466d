//! Text representation providers for generated preferences.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::matrix::fnv1a;
use super::{l2_normalize, RetrievalError};
use crate::protocol::normalize_title;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    HashedFallback,
    ExternalFile,
    RemoteService,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    pub values: Vec<f32>,
    pub source: VectorSource,
}

pub trait TextEmbedder: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<PreferenceVector, RetrievalError>;
}

/// Signed feature hashing of character trigrams over the normalized text,
/// unit-normalized. Deterministic across runs and platforms.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        HashedEmbedder { dim }
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let padded: Vec<char> = format!(" {} ", normalize_title(text)).chars().collect();
        let mut v = vec![0f32; self.dim];
        let mut buf = [0u8; 12];
        for gram in padded.windows(3) {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a(&buf[..len]);
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        if !l2_normalize(&mut v) {
            // every trigram cancelled out; fall back to a single whole-text bucket
            v[(fnv1a(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl TextEmbedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<PreferenceVector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        Ok(PreferenceVector {
            values: self.vector(text),
            source: VectorSource::HashedFallback,
        })
    }
}

/// Precomputed text vectors keyed by normalized text; unknown texts fall
/// back to hashing.
#[derive(Debug, Clone)]
pub struct LookupEmbedder {
    table: HashMap<String, Vec<f32>>,
    fallback: HashedEmbedder,
}

#[derive(Debug, Deserialize)]
struct LookupLine {
    text: String,
    vector: Vec<f32>,
}

impl LookupEmbedder {
    pub fn new(dim: usize) -> Self {
        LookupEmbedder {
            table: HashMap::new(),
            fallback: HashedEmbedder::new(dim),
        }
    }

    pub fn insert(&mut self, text: &str, vector: Vec<f32>) -> Result<(), RetrievalError> {
        if vector.len() != self.fallback.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.fallback.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::Format(format!("non-finite vector for {text:?}")));
        }
        self.table.insert(normalize_title(text), vector);
        Ok(())
    }

    /// Loads `{"text": ..., "vector": [...]}` lines.
    pub fn load(path: &Path, dim: usize) -> Result<Self, RetrievalError> {
        let lines: Vec<LookupLine> =
            crate::io::read_jsonl(path).map_err(|e| RetrievalError::Format(e.to_string()))?;
        let mut out = Self::new(dim);
        for l in lines {
            out.insert(&l.text, l.vector)?;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextEmbedder for LookupEmbedder {
    fn dim(&self) -> usize {
        self.fallback.dim
    }

    fn embed(&self, text: &str) -> Result<PreferenceVector, RetrievalError> {
        match self.table.get(&normalize_title(text)) {
            Some(v) => Ok(PreferenceVector {
                values: v.clone(),
                source: VectorSource::ExternalFile,
            }),
            None => self.fallback.embed(text),
        }
    }
}

/// Calls an embedding service: `POST url` with `{"text": ...}`, expecting
/// `{"vector": [...]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        RemoteEmbedder {
            url: url.into(),
            dim,
            agent,
        }
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<PreferenceVector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let resp: EmbedResponse = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { text })
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| RetrievalError::Transport(e.to_string()))?;
        if resp.vector.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                found: resp.vector.len(),
            });
        }
        if resp.vector.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::Format("remote vector has non-finite values".into()));
        }
        Ok(PreferenceVector {
            values: resp.vector,
            source: VectorSource::RemoteService,
        })
    }
}
