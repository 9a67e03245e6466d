//! Recall@K / NDCG@K over the full item space and over rollout results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitSample;
use crate::env::Environment;
use crate::retrieval::{RetrievalError, Retriever};
use crate::rollout::{run_batch, EpisodeResult, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub at: BTreeMap<usize, AtK>,
    /// Mean candidate-pool size; rollout reports only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_invocations: Option<f64>,
    /// Episodes per invocation count.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub invocations: BTreeMap<usize, usize>,
}

/// Discounted gain of a single relevant item at 1-based rank `r`.
pub fn ndcg_gain(r: usize) -> f64 {
    1.0 / ((r + 1) as f64).log2()
}

/// Means over 1-based ranks; `None` is a miss.
pub fn metrics_from_ranks(ranks: &[Option<usize>], ks: &[usize]) -> BTreeMap<usize, AtK> {
    let n = ranks.len().max(1) as f64;
    ks.iter()
        .map(|&k| {
            let (mut hits, mut gain) = (0usize, 0f64);
            for r in ranks.iter().flatten().filter(|&&r| r <= k) {
                hits += 1;
                gain += ndcg_gain(*r);
            }
            (
                k,
                AtK {
                    recall: hits as f64 / n,
                    ndcg: gain / n,
                },
            )
        })
        .collect()
}

/// Full-space rank of each label under the history-only query.
pub fn evaluate_retriever(
    retriever: &Retriever,
    samples: &[SplitSample],
    ks: &[usize],
) -> Result<MetricReport, RetrievalError> {
    let ranks = samples
        .par_iter()
        .map(|s| retriever.history_rank(&s.history, s.label).map(Some))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport {
        n_samples: samples.len(),
        at: metrics_from_ranks(&ranks, ks),
        coverage: None,
        mean_invocations: None,
        invocations: BTreeMap::new(),
    })
}

/// Rank of the label within the final list; format-invalid episodes are misses.
pub fn final_list_rank(result: &EpisodeResult) -> Option<usize> {
    if !result.report.overall_ok {
        return None;
    }
    result
        .trajectory
        .final_items
        .iter()
        .position(|&i| i == result.label)
        .map(|p| p + 1)
}

pub fn evaluate_trajectories(results: &[EpisodeResult], ks: &[usize]) -> MetricReport {
    let ranks: Vec<Option<usize>> = results.iter().map(final_list_rank).collect();
    let n = results.len().max(1) as f64;
    let mut invocations = BTreeMap::new();
    for r in results {
        *invocations.entry(r.trajectory.m).or_insert(0) += 1;
    }
    MetricReport {
        n_samples: results.len(),
        at: metrics_from_ranks(&ranks, ks),
        coverage: Some(results.iter().map(|r| r.trajectory.candidate_pool().len() as f64).sum::<f64>() / n),
        mean_invocations: Some(results.iter().map(|r| r.trajectory.m as f64).sum::<f64>() / n),
        invocations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub report: MetricReport,
    pub failed_episodes: usize,
}

/// Runs every policy over the same samples. Failed episodes are counted and
/// left out of that policy's report.
pub fn compare_modes(
    policies: &[(String, Arc<dyn Policy>)],
    env: &Environment,
    samples: &[SplitSample],
    rollouts_per_sample: usize,
    ks: &[usize],
) -> Vec<ComparisonRow> {
    policies
        .iter()
        .map(|(name, policy)| {
            let batch = run_batch(policy.as_ref(), env, samples, rollouts_per_sample);
            let failed_episodes = batch.iter().filter(|e| e.result.is_none()).count();
            let results: Vec<EpisodeResult> = batch.into_iter().filter_map(|e| e.result).collect();
            ComparisonRow {
                policy: name.clone(),
                report: evaluate_trajectories(&results, ks),
                failed_episodes,
            }
        })
        .collect()
}

/// Aligned plain-text table, one row per report.
pub fn render_table(rows: &[(String, &MetricReport)], ks: &[usize]) -> String {
    let mut header = vec!["name".to_string(), "n".to_string()];
    for k in ks {
        header.push(format!("recall@{k}"));
        header.push(format!("ndcg@{k}"));
    }
    header.push("mean_m".into());
    header.push("coverage".into());
    let mut table = vec![header];
    for (name, report) in rows {
        let mut row = vec![name.clone(), report.n_samples.to_string()];
        for k in ks {
            match report.at.get(k) {
                Some(m) => {
                    row.push(format!("{:.4}", m.recall));
                    row.push(format!("{:.4}", m.ndcg));
                }
                None => row.extend(["-".to_string(), "-".to_string()]),
            }
        }
        row.push(report.mean_invocations.map_or("-".into(), |v| format!("{v:.2}")));
        row.push(report.coverage.map_or("-".into(), |v| format!("{v:.2}")));
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
