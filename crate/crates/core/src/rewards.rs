//! Hierarchical rule-based rewards.
//!
//! Process level: format, invocation count, preference diversity.
//! Outcome level: point-wise similarity, hit, linear-decay rank.
//! The cold-start stage sums the process rewards; the recommendation stage
//! sums format with the outcome rewards.

use serde::{Deserialize, Serialize};

use crate::corpus::ItemId;
use crate::protocol::{FormatReport, Trajectory};
use crate::retrieval::{PreferenceVector, RetrievalError, RetrievalIndex, Retriever};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ColdStart,
    #[default]
    Recommendation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Invocation count above which the invocation reward saturates at 1.
    pub max_invocations: usize,
    /// Required final list length.
    pub list_len: usize,
    pub rank_step: f64,
    pub stage: Stage,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            max_invocations: 3,
            list_len: 10,
            rank_step: 0.2,
            stage: Stage::Recommendation,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.max_invocations == 0 || self.list_len == 0 || self.rank_step.is_nan() || self.rank_step <= 0.0 {
            return Err(RewardError::Config(format!(
                "need max_invocations >= 1, list_len >= 1, rank_step > 0 (got {}, {}, {})",
                self.max_invocations, self.list_len, self.rank_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("item {0} is not in the index")]
    UnknownItem(ItemId),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("invalid reward config: {0}")]
    Config(String),
}

/// All six components and both stage totals, in a fixed field order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub invocation: f64,
    pub diversity: f64,
    pub point: f64,
    pub hit: f64,
    pub rank: f64,
    pub cold_total: f64,
    pub rec_total: f64,
    pub stage: Stage,
    pub stage_total: f64,
}

impl RewardBreakdown {
    /// `(name, value)` pairs in serialization order.
    pub fn components(&self) -> [(&'static str, f64); 9] {
        [
            ("format", self.format),
            ("invocation", self.invocation),
            ("diversity", self.diversity),
            ("point", self.point),
            ("hit", self.hit),
            ("rank", self.rank),
            ("cold_total", self.cold_total),
            ("rec_total", self.rec_total),
            ("stage_total", self.stage_total),
        ]
    }
}

pub fn reward_format(report: &FormatReport) -> f64 {
    if report.overall_ok {
        0.0
    } else {
        -1.0
    }
}

pub fn reward_invocation(m: usize, max_invocations: usize) -> f64 {
    if m > max_invocations {
        1.0
    } else if m > 1 {
        (m - 1) as f64 * 0.5
    } else {
        0.0
    }
}

/// One minus the mean pairwise cosine similarity; 0 for fewer than two preferences.
pub fn reward_diversity(preferences: &[PreferenceVector]) -> f64 {
    let m = preferences.len();
    if m < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += cosine(&preferences[i].values, &preferences[j].values);
        }
    }
    let pairs = (m * (m - 1) / 2) as f64;
    1.0 - sum / pairs
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Position-weighted mean of textual and collaborative cosine similarity to
/// the label; weights `(K' - k + 1)^2` with `K'` the list length.
pub fn reward_point(final_items: &[ItemId], label: ItemId, index: &RetrievalIndex) -> Result<f64, RewardError> {
    let catalog = index.catalog();
    for &id in final_items.iter().chain(std::iter::once(&label)) {
        if !catalog.contains(id) {
            return Err(RewardError::UnknownItem(id));
        }
    }
    let similarities: Vec<(f64, f64)> = final_items
        .iter()
        .map(|&id| (index.text_similarity(id, label), index.collab_similarity(id, label)))
        .collect();
    Ok(point_from_similarities(&similarities))
}

/// Point reward from per-position `(textual, collaborative)` similarities.
pub fn point_from_similarities(similarities: &[(f64, f64)]) -> f64 {
    let len = similarities.len();
    if len == 0 {
        return 0.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, (st, sc)) in similarities.iter().enumerate() {
        let w = ((len - k) as f64).powi(2);
        num += w * (st + sc);
        den += w;
    }
    num / (2.0 * den)
}

pub fn reward_hit(final_items: &[ItemId], label: ItemId) -> f64 {
    if final_items.contains(&label) {
        1.0
    } else {
        0.0
    }
}

/// `(K - k_y + 1) * step` for the first occurrence `k_y` of the label; 0 on a
/// miss or when `k_y > K`.
pub fn reward_rank(final_items: &[ItemId], label: ItemId, k: usize, step: f64) -> f64 {
    match final_items.iter().position(|&i| i == label) {
        Some(pos) if pos < k => (k - pos) as f64 * step,
        _ => 0.0,
    }
}

/// Scores a parsed trajectory. Outcome rewards look at the first `list_len`
/// resolved items; an empty final list scores 0 on every outcome component.
pub fn score_trajectory(
    trajectory: &Trajectory,
    report: &FormatReport,
    label: ItemId,
    retriever: &Retriever,
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    config.validate()?;
    let index = retriever.index();
    if !index.catalog().contains(label) {
        return Err(RewardError::UnknownItem(label));
    }
    let format = reward_format(report);
    let invocation = reward_invocation(trajectory.m, config.max_invocations);
    let preferences = trajectory
        .turns
        .iter()
        .filter(|t| !t.preference.trim().is_empty())
        .map(|t| retriever.embed_text(&t.preference))
        .collect::<Result<Vec<_>, _>>()?;
    let diversity = reward_diversity(&preferences);

    let list = &trajectory.final_items[..trajectory.final_items.len().min(config.list_len)];
    let point = reward_point(list, label, index)?;
    let hit = reward_hit(list, label);
    let rank = reward_rank(list, label, config.list_len, config.rank_step);

    Ok(assemble(format, invocation, diversity, point, hit, rank, config.stage))
}

pub fn assemble(
    format: f64,
    invocation: f64,
    diversity: f64,
    point: f64,
    hit: f64,
    rank: f64,
    stage: Stage,
) -> RewardBreakdown {
    let cold_total = format + invocation + diversity;
    let rec_total = format + point + hit + rank;
    RewardBreakdown {
        format,
        invocation,
        diversity,
        point,
        hit,
        rank,
        cold_total,
        rec_total,
        stage,
        stage_total: match stage {
            Stage::ColdStart => cold_total,
            Stage::Recommendation => rec_total,
        },
    }
}
