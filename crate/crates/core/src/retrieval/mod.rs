//! Preference-aware retrieval: history encoding, preference embedding,
//! fusion and exhaustive top-k scoring over the whole catalog.

mod index;
mod matrix;
mod text;

use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use index::{fuse, IndexConfig, ItemSide, RetrievalIndex, Scored, ScoringMode};
pub use matrix::{user_key, EmbeddingKind, EmbeddingMatrix, UserVectors};
pub use text::{HashedEmbedder, LookupEmbedder, PreferenceVector, RemoteEmbedder, TextEmbedder, VectorSource};

use crate::corpus::{Catalog, InteractionSequence, ItemId};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file: {0}")]
    Format(String),
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{kind:?} row of item {item} is zero and cannot be normalized")]
    ZeroRow { item: ItemId, kind: EmbeddingKind },
    #[error("item {0} is not in the index")]
    UnknownItem(ItemId),
    #[error("item {0} is masked")]
    TargetMasked(ItemId),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text provider unreachable: {0}")]
    Transport(String),
    #[error("invalid retrieval config: {0}")]
    Config(String),
}

impl RetrievalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Whether retrying the same call may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, RetrievalError::Transport(_))
    }
}

/// Scales `v` to unit length; returns false (leaving `v` untouched) for the zero vector.
pub fn l2_normalize(v: &mut [f32]) -> bool {
    let n = index::norm(v);
    if n == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    true
}

/// Loads both embedding files and builds the index.
pub fn build_index(
    catalog: Arc<Catalog>,
    collab_file: &Path,
    text_file: &Path,
    config: IndexConfig,
) -> Result<RetrievalIndex, RetrievalError> {
    let collab = EmbeddingMatrix::read(collab_file)?;
    let text = EmbeddingMatrix::read(text_file)?;
    if collab.kind() != EmbeddingKind::Collaborative || text.kind() != EmbeddingKind::Textual {
        return Err(RetrievalError::Format(format!(
            "expected collaborative and textual files, found {:?} and {:?}",
            collab.kind(),
            text.kind()
        )));
    }
    RetrievalIndex::new(catalog, collab, text, config)
}

/// How a user's history becomes a vector.
#[derive(Debug, Clone, Default)]
pub enum HistoryEncoder {
    /// Exponentially decayed mean of collaborative rows.
    #[default]
    DecayedMean,
    /// Precomputed vectors per user; users missing from the table use the decayed mean.
    UserVectors(Arc<UserVectors>),
}

/// Index plus text provider and history encoder: everything needed to turn
/// (history, preference) into a ranked item list.
#[derive(Debug, Clone)]
pub struct Retriever {
    index: Arc<RetrievalIndex>,
    embedder: Arc<dyn TextEmbedder>,
    history_encoder: HistoryEncoder,
    mask_history: bool,
}

impl Retriever {
    pub fn new(
        index: Arc<RetrievalIndex>,
        embedder: Arc<dyn TextEmbedder>,
        history_encoder: HistoryEncoder,
        mask_history: bool,
    ) -> Result<Self, RetrievalError> {
        if embedder.dim() != index.dim() {
            return Err(RetrievalError::DimMismatch {
                expected: index.dim(),
                found: embedder.dim(),
            });
        }
        if let HistoryEncoder::UserVectors(uv) = &history_encoder {
            if uv.dim() != index.dim() {
                return Err(RetrievalError::DimMismatch {
                    expected: index.dim(),
                    found: uv.dim(),
                });
            }
        }
        Ok(Retriever {
            index,
            embedder,
            history_encoder,
            mask_history,
        })
    }

    pub fn index(&self) -> &Arc<RetrievalIndex> {
        &self.index
    }

    pub fn embedder(&self) -> &Arc<dyn TextEmbedder> {
        &self.embedder
    }

    pub fn masks_history(&self) -> bool {
        self.mask_history
    }

    pub fn encode_history(&self, history: &InteractionSequence) -> Vec<f32> {
        if let HistoryEncoder::UserVectors(uv) = &self.history_encoder {
            if let Some(v) = uv.get(&history.user_id) {
                let mut v = v.to_vec();
                if self.index.config().scoring == ScoringMode::Cosine {
                    l2_normalize(&mut v);
                }
                return v;
            }
        }
        self.index.encode_history(&history.items)
    }

    /// Embeds preference text, unit-normalized in cosine mode.
    pub fn embed_text(&self, text: &str) -> Result<PreferenceVector, RetrievalError> {
        let mut v = self.embedder.embed(text)?;
        if v.values.len() != self.index.dim() {
            return Err(RetrievalError::DimMismatch {
                expected: self.index.dim(),
                found: v.values.len(),
            });
        }
        if self.index.config().scoring == ScoringMode::Cosine {
            l2_normalize(&mut v.values);
        }
        Ok(v)
    }

    /// Fused query for a history and an optional preference. A missing or
    /// blank preference contributes the zero vector.
    pub fn query(&self, history: &InteractionSequence, preference: Option<&str>) -> Result<Vec<f32>, RetrievalError> {
        let h = self.encode_history(history);
        let text = match preference.filter(|p| !p.trim().is_empty()) {
            Some(p) => self.embed_text(p)?.values,
            None => vec![0f32; self.index.dim()],
        };
        self.index.fuse(&h, &text)
    }

    /// Items masked for this history under the configured policy.
    pub fn history_mask(&self, history: &InteractionSequence) -> Vec<ItemId> {
        if self.mask_history {
            history.items.clone()
        } else {
            Vec::new()
        }
    }

    pub fn retrieve(
        &self,
        history: &InteractionSequence,
        preference: Option<&str>,
        k: usize,
    ) -> Result<Vec<Scored>, RetrievalError> {
        let q = self.query(history, preference)?;
        self.index.retrieve_top_k(&q, k, &self.history_mask(history))
    }

    /// Full-space rank of `label` under the history-only encoding. The label
    /// itself is never masked, so repeat consumption still gets a rank.
    pub fn history_rank(&self, history: &InteractionSequence, label: ItemId) -> Result<usize, RetrievalError> {
        let q = self.index.fuse(&self.encode_history(history), &vec![0f32; self.index.dim()])?;
        let mask: Vec<ItemId> = self
            .history_mask(history)
            .into_iter()
            .filter(|&i| i != label)
            .collect();
        self.index.rank_of(&q, label, &mask)
    }
}
