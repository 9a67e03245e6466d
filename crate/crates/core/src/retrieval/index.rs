use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::matrix::{EmbeddingKind, EmbeddingMatrix};
use super::{l2_normalize, RetrievalError};
use crate::corpus::{Catalog, ItemId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    #[default]
    Cosine,
    Dot,
}

/// Which item representation queries are scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSide {
    /// Average of the collaborative and textual rows (each unit-normalized
    /// first in cosine mode).
    #[default]
    Fused,
    Collaborative,
    Textual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub scoring: ScoringMode,
    pub item_side: ItemSide,
    /// Decay of the built-in history encoder, in (0, 1].
    pub decay: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            scoring: ScoringMode::Cosine,
            item_side: ItemSide::Fused,
            decay: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub item: ItemId,
    pub score: f64,
}

/// Descending score, then ascending id.
fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item.cmp(&b.item))
}

/// Immutable exhaustive-scan index over the catalog.
#[derive(Debug)]
pub struct RetrievalIndex {
    catalog: Arc<Catalog>,
    collaborative: EmbeddingMatrix,
    textual: EmbeddingMatrix,
    /// Row-major scoring vectors, one per item.
    items: Vec<f32>,
    collab_norm: Vec<f64>,
    text_norm: Vec<f64>,
    config: IndexConfig,
}

impl RetrievalIndex {
    pub fn new(
        catalog: Arc<Catalog>,
        collaborative: EmbeddingMatrix,
        textual: EmbeddingMatrix,
        config: IndexConfig,
    ) -> Result<Self, RetrievalError> {
        if !(config.decay > 0.0 && config.decay <= 1.0) {
            return Err(RetrievalError::Config(format!("decay {} outside (0, 1]", config.decay)));
        }
        let n = catalog.len();
        for m in [&collaborative, &textual] {
            if m.rows() != n {
                return Err(RetrievalError::RowCount {
                    expected: n,
                    found: m.rows(),
                });
            }
        }
        if collaborative.dim() != textual.dim() {
            return Err(RetrievalError::DimMismatch {
                expected: collaborative.dim(),
                found: textual.dim(),
            });
        }
        let dim = collaborative.dim();
        let norms = |m: &EmbeddingMatrix| -> Vec<f64> { (0..n).map(|i| norm(m.row(i))).collect() };
        let collab_norm = norms(&collaborative);
        let text_norm = norms(&textual);
        let cosine = config.scoring == ScoringMode::Cosine;
        if cosine {
            for (kind, ns) in [(EmbeddingKind::Collaborative, &collab_norm), (EmbeddingKind::Textual, &text_norm)] {
                if let Some(i) = ns.iter().position(|&v| v == 0.0) {
                    return Err(RetrievalError::ZeroRow {
                        item: ItemId(i as u32),
                        kind,
                    });
                }
            }
        }

        let mut items = Vec::with_capacity(n * dim);
        for i in 0..n {
            let c = collaborative.row(i);
            let t = textual.row(i);
            let (cs, ts) = if cosine {
                (1.0 / collab_norm[i], 1.0 / text_norm[i])
            } else {
                (1.0, 1.0)
            };
            let mut row: Vec<f32> = match config.item_side {
                ItemSide::Fused => (0..dim)
                    .map(|d| (0.5 * (c[d] as f64 * cs + t[d] as f64 * ts)) as f32)
                    .collect(),
                ItemSide::Collaborative => c.iter().map(|&v| (v as f64 * cs) as f32).collect(),
                ItemSide::Textual => t.iter().map(|&v| (v as f64 * ts) as f32).collect(),
            };
            if cosine && !l2_normalize(&mut row) {
                return Err(RetrievalError::ZeroRow {
                    item: ItemId(i as u32),
                    kind: EmbeddingKind::Collaborative,
                });
            }
            items.extend_from_slice(&row);
        }
        Ok(RetrievalIndex {
            catalog,
            collaborative,
            textual,
            items,
            collab_norm,
            text_norm,
            config,
        })
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.collaborative.dim()
    }

    pub fn len(&self) -> usize {
        self.catalog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.catalog.is_empty()
    }

    pub fn collaborative(&self) -> &EmbeddingMatrix {
        &self.collaborative
    }

    pub fn textual(&self) -> &EmbeddingMatrix {
        &self.textual
    }

    /// The vector item `id` is scored with.
    pub fn item_vector(&self, id: ItemId) -> &[f32] {
        let d = self.dim();
        &self.items[id.index() * d..(id.index() + 1) * d]
    }

    /// Built-in history encoder: `Σ γ^(n-i) c_i / Σ γ^(n-i)` over collaborative
    /// rows, unit-normalized in cosine mode. Empty history gives the zero vector.
    pub fn encode_history(&self, history: &[ItemId]) -> Vec<f32> {
        let dim = self.dim();
        let n = history.len();
        let mut acc = vec![0f64; dim];
        let mut total = 0f64;
        for (i, &id) in history.iter().enumerate() {
            let w = self.config.decay.powi((n - 1 - i) as i32);
            total += w;
            for (a, &v) in acc.iter_mut().zip(self.collaborative.row(id.index())) {
                *a += w * v as f64;
            }
        }
        if total == 0.0 {
            return vec![0f32; dim];
        }
        let mut out: Vec<f32> = acc.iter().map(|a| (a / total) as f32).collect();
        if self.config.scoring == ScoringMode::Cosine {
            l2_normalize(&mut out);
        }
        out
    }

    /// `½(history + text)`, re-normalized in cosine mode.
    pub fn fuse(&self, history: &[f32], text: &[f32]) -> Result<Vec<f32>, RetrievalError> {
        fuse(history, text, self.config.scoring)
    }

    fn prepare_query(&self, h: &[f32]) -> Result<Vec<f32>, RetrievalError> {
        if h.len() != self.dim() {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim(),
                found: h.len(),
            });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::Format("query has non-finite values".into()));
        }
        let mut q = h.to_vec();
        if self.config.scoring == ScoringMode::Cosine {
            l2_normalize(&mut q);
        }
        Ok(q)
    }

    fn mask_bits(&self, mask: &[ItemId]) -> Result<Vec<bool>, RetrievalError> {
        let mut bits = vec![false; self.len()];
        for &id in mask {
            *bits
                .get_mut(id.index())
                .ok_or(RetrievalError::UnknownItem(id))? = true;
        }
        Ok(bits)
    }

    fn score_all(&self, q: &[f32], masked: &[bool]) -> Vec<Scored> {
        self.items
            .chunks_exact(self.dim())
            .enumerate()
            .filter(|(i, _)| !masked[*i])
            .map(|(i, row)| Scored {
                item: ItemId(i as u32),
                score: dot(row, q),
            })
            .collect()
    }

    /// Score of a single item against query `h` (after query preparation).
    pub fn score(&self, h: &[f32], item: ItemId) -> Result<f64, RetrievalError> {
        let q = self.prepare_query(h)?;
        if !self.catalog.contains(item) {
            return Err(RetrievalError::UnknownItem(item));
        }
        Ok(dot(self.item_vector(item), &q))
    }

    /// Top-`k` unmasked items, best first; ties go to the lower id. Returns
    /// fewer than `k` items when fewer are unmasked.
    pub fn retrieve_top_k(&self, h: &[f32], k: usize, mask: &[ItemId]) -> Result<Vec<Scored>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::Config("k must be at least 1".into()));
        }
        let q = self.prepare_query(h)?;
        let masked = self.mask_bits(mask)?;
        let mut scored = self.score_all(&q, &masked);
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        Ok(scored)
    }

    /// 1-based position of `target` under the [`Self::retrieve_top_k`] order.
    pub fn rank_of(&self, h: &[f32], target: ItemId, mask: &[ItemId]) -> Result<usize, RetrievalError> {
        if !self.catalog.contains(target) {
            return Err(RetrievalError::UnknownItem(target));
        }
        let q = self.prepare_query(h)?;
        let masked = self.mask_bits(mask)?;
        if masked[target.index()] {
            return Err(RetrievalError::TargetMasked(target));
        }
        let t = Scored {
            item: target,
            score: dot(self.item_vector(target), &q),
        };
        let ahead = self
            .items
            .chunks_exact(self.dim())
            .enumerate()
            .filter(|&(i, row)| {
                !masked[i]
                    && rank_order(
                        &Scored {
                            item: ItemId(i as u32),
                            score: dot(row, &q),
                        },
                        &t,
                    ) == Ordering::Less
            })
            .count();
        Ok(ahead + 1)
    }

    /// Cosine similarity of two items' textual rows.
    pub fn text_similarity(&self, a: ItemId, b: ItemId) -> f64 {
        cosine(
            self.textual.row(a.index()),
            self.text_norm[a.index()],
            self.textual.row(b.index()),
            self.text_norm[b.index()],
        )
    }

    /// Cosine similarity of two items' collaborative rows.
    pub fn collab_similarity(&self, a: ItemId, b: ItemId) -> f64 {
        cosine(
            self.collaborative.row(a.index()),
            self.collab_norm[a.index()],
            self.collaborative.row(b.index()),
            self.collab_norm[b.index()],
        )
    }
}

pub fn fuse(history: &[f32], text: &[f32], scoring: ScoringMode) -> Result<Vec<f32>, RetrievalError> {
    if history.len() != text.len() {
        return Err(RetrievalError::DimMismatch {
            expected: history.len(),
            found: text.len(),
        });
    }
    let mut h: Vec<f32> = history
        .iter()
        .zip(text)
        .map(|(&a, &b)| (0.5 * (a as f64 + b as f64)) as f32)
        .collect();
    if scoring == ScoringMode::Cosine {
        l2_normalize(&mut h);
    }
    Ok(h)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(n: usize) -> Arc<Catalog> {
        Arc::new(Catalog::from_entries((0..n).map(|i| (format!("e{i}"), format!("t{i}"), None))).unwrap())
    }

    fn matrix(kind: EmbeddingKind, rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(kind, rows).unwrap()
    }

    fn eye(n: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    fn index_with(rows: Vec<Vec<f32>>, text: Vec<Vec<f32>>, config: IndexConfig) -> RetrievalIndex {
        RetrievalIndex::new(
            catalog(rows.len()),
            matrix(EmbeddingKind::Collaborative, &rows),
            matrix(EmbeddingKind::Textual, &text),
            config,
        )
        .unwrap()
    }

    #[test]
    fn builds_and_checks_shapes() {
        let idx = index_with(eye(4)[..3].to_vec(), eye(4)[..3].to_vec(), IndexConfig::default());
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.dim(), 4);
        let err = RetrievalIndex::new(
            catalog(3),
            matrix(EmbeddingKind::Collaborative, &eye(3)[..2]),
            matrix(EmbeddingKind::Textual, &eye(3)),
            IndexConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::RowCount { expected: 3, found: 2 }));
    }

    #[test]
    fn zero_row_rejected_in_cosine_mode() {
        let mut rows = eye(3);
        rows[1] = vec![0.0; 3];
        let err = RetrievalIndex::new(
            catalog(3),
            matrix(EmbeddingKind::Collaborative, &rows),
            matrix(EmbeddingKind::Textual, &eye(3)),
            IndexConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::ZeroRow { item: ItemId(1), .. }));
        let dot_cfg = IndexConfig {
            scoring: ScoringMode::Dot,
            ..Default::default()
        };
        assert!(RetrievalIndex::new(
            catalog(3),
            matrix(EmbeddingKind::Collaborative, &rows),
            matrix(EmbeddingKind::Textual, &eye(3)),
            dot_cfg,
        )
        .is_ok());
    }

    #[test]
    fn nearest_neighbor_identity() {
        let idx = index_with(eye(5), eye(5), IndexConfig::default());
        for j in 0..5 {
            let h = idx.fuse(&idx.encode_history(&[]), &eye(5)[j]).unwrap();
            let top = idx.retrieve_top_k(&h, 1, &[]).unwrap();
            assert_eq!(top[0].item, ItemId(j as u32));
        }
    }

    #[test]
    fn history_encoding_cases() {
        let rows = vec![vec![3.0, 0.0], vec![0.0, 1.0]];
        let idx = index_with(rows.clone(), rows.clone(), IndexConfig {
            decay: 1.0,
            ..Default::default()
        });
        assert_eq!(idx.encode_history(&[]), vec![0.0, 0.0]);
        assert_eq!(idx.encode_history(&[ItemId(0)]), vec![1.0, 0.0]);
        // mean (1.5, 0.5), normalized
        let h = idx.encode_history(&[ItemId(0), ItemId(1)]);
        let n = (1.5f64.powi(2) + 0.25).sqrt();
        assert!((h[0] as f64 - 1.5 / n).abs() < 1e-6);
        assert!((h[1] as f64 - 0.5 / n).abs() < 1e-6);
    }

    #[test]
    fn decay_weights_recent_items() {
        let rows = eye(2);
        let idx = index_with(rows.clone(), rows, IndexConfig {
            decay: 0.5,
            scoring: ScoringMode::Dot,
            ..Default::default()
        });
        // weights 0.5 for item 0, 1 for item 1, divided by 1.5
        let h = idx.encode_history(&[ItemId(0), ItemId(1)]);
        assert!((h[0] as f64 - 1.0 / 3.0).abs() < 1e-7);
        assert!((h[1] as f64 - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn fusion_cases() {
        let u = vec![0.6f32, 0.8];
        assert_eq!(fuse(&u, &u, ScoringMode::Cosine).unwrap(), u);
        let zero = vec![0.0f32; 2];
        assert_eq!(fuse(&zero, &u, ScoringMode::Cosine).unwrap(), u);
        let h = fuse(&[1.0, 0.0], &[0.0, 1.0], ScoringMode::Cosine).unwrap();
        let r = std::f32::consts::FRAC_1_SQRT_2;
        assert!((h[0] - r).abs() < 1e-7 && (h[1] - r).abs() < 1e-7);
        assert!(fuse(&[1.0], &[1.0, 0.0], ScoringMode::Dot).is_err());
    }

    #[test]
    fn mask_promotes_next_item() {
        let rows = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let idx = index_with(rows.clone(), rows, IndexConfig::default());
        let q = [1.0, 0.0];
        let full = idx.retrieve_top_k(&q, 3, &[]).unwrap();
        assert_eq!(full[0].item, ItemId(0));
        let masked = idx.retrieve_top_k(&q, 3, &[ItemId(0)]).unwrap();
        assert_eq!(masked[0].item, full[1].item);
        assert_eq!(masked.len(), 2);
        assert_eq!(idx.rank_of(&q, ItemId(2), &[]).unwrap(), 3);
        assert_eq!(idx.rank_of(&q, ItemId(2), &[ItemId(0)]).unwrap(), 2);
        assert!(matches!(idx.rank_of(&q, ItemId(0), &[ItemId(0)]), Err(RetrievalError::TargetMasked(_))));
        assert!(matches!(idx.rank_of(&q, ItemId(7), &[]), Err(RetrievalError::UnknownItem(_))));
    }

    #[test]
    fn ties_break_by_id() {
        let rows = vec![vec![1.0, 0.0]; 4];
        let idx = index_with(rows.clone(), rows, IndexConfig::default());
        let ids: Vec<u32> = idx.retrieve_top_k(&[1.0, 0.0], 3, &[]).unwrap().iter().map(|s| s.item.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(idx.rank_of(&[1.0, 0.0], ItemId(3), &[]).unwrap(), 4);
    }

    #[test]
    fn item_similarities() {
        let c = vec![vec![2.0, 0.0], vec![1.0, 1.0]];
        let t = vec![vec![0.0, 1.0], vec![0.0, 5.0]];
        let idx = index_with(c, t, IndexConfig::default());
        assert!((idx.collab_similarity(ItemId(0), ItemId(1)) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((idx.text_similarity(ItemId(0), ItemId(1)) - 1.0).abs() < 1e-12);
    }
}
