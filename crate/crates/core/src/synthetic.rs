//! Small constructed corpora with known answers, for smoke tests and demos.
//!
//! Preference texts are mapped to fixed vectors through a lookup table, so
//! retrieval results follow directly from the construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::corpus::{Catalog, InteractionSequence, ItemId, Split, SplitSample};
use crate::env::{EnvError, Environment};
use crate::io::{write_atomic, write_jsonl, IoError};
use crate::retrieval::{
    EmbeddingKind, EmbeddingMatrix, HistoryEncoder, IndexConfig, LookupEmbedder, RetrievalError, RetrievalIndex,
    Retriever,
};
use crate::rewards::RewardConfig;
use crate::rollout::{FinalSelection, RolloutConfig, Template, TemplateTurn};

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub titles: Vec<String>,
    pub collaborative: Vec<Vec<f32>>,
    pub textual: Vec<Vec<f32>>,
    /// Text to vector entries for the lookup embedder.
    pub lookup: Vec<(String, Vec<f32>)>,
    pub samples: Vec<SplitSample>,
}

fn unit(dim: usize, axis: usize) -> Vec<f32> {
    let mut v = vec![0f32; dim];
    v[axis] = 1.0;
    v
}

fn sample(user: String, history: Vec<ItemId>, label: ItemId) -> SplitSample {
    SplitSample {
        history: InteractionSequence::new(user, history),
        label,
        split: Split::Test,
        difficulty_rank: None,
    }
}

/// `n` items whose collaborative and textual rows are the same one-hot
/// vector; each title embeds to its own row. One empty-history sample per
/// item, labelled with that item, so the history encoding is zero.
pub fn one_hot(n: usize) -> SyntheticCorpus {
    let titles: Vec<String> = (0..n).map(|i| format!("Item {i:04}")).collect();
    let rows: Vec<Vec<f32>> = (0..n).map(|i| unit(n, i)).collect();
    SyntheticCorpus {
        lookup: titles.iter().cloned().zip(rows.iter().cloned()).collect(),
        samples: (0..n).map(|i| sample(format!("u{i}"), vec![], ItemId(i as u32))).collect(),
        titles,
        collaborative: rows.clone(),
        textual: rows,
    }
}

/// Preference text that retrieves cluster `c` of [`clustered`].
pub fn cluster_preference(c: usize) -> String {
    format!("taste for cluster {c}")
}

/// `clusters` groups of `size` items on orthogonal axes; item rows equal
/// their cluster axis. [`cluster_preference`] texts map to the axes. Samples
/// have empty histories; sample `j` is labelled with item `j` of cluster
/// `label_cluster`.
pub fn clustered(clusters: usize, size: usize, label_cluster: usize, n_labels: usize) -> SyntheticCorpus {
    let dim = clusters.max(2);
    let titles: Vec<String> = (0..clusters * size)
        .map(|i| format!("Cluster {} Item {:03}", i / size, i % size))
        .collect();
    let rows: Vec<Vec<f32>> = (0..clusters * size).map(|i| unit(dim, i / size)).collect();
    SyntheticCorpus {
        titles,
        collaborative: rows.clone(),
        textual: rows,
        lookup: (0..clusters).map(|c| (cluster_preference(c), unit(dim, c))).collect(),
        samples: (0..n_labels)
            .map(|j| sample(format!("u{j}"), vec![], ItemId((label_cluster * size + j) as u32)))
            .collect(),
    }
}

/// Template asking once per preference and merging the lists round-robin.
pub fn template(preferences: &[String]) -> Template {
    Template {
        turns: preferences
            .iter()
            .enumerate()
            .map(|(i, p)| TemplateTurn {
                thought: format!("Angle {}.", i + 1),
                preference: p.clone(),
            })
            .collect(),
        closing_thought: "Merging what came back.".into(),
        final_selection: FinalSelection::RoundRobin,
    }
}

impl SyntheticCorpus {
    pub fn dim(&self) -> usize {
        self.collaborative[0].len()
    }

    pub fn catalog(&self) -> Catalog {
        Catalog::from_entries(self.titles.iter().enumerate().map(|(i, t)| (format!("x{i}"), t.clone(), None)))
            .expect("synthetic titles are unique")
    }

    pub fn embedder(&self) -> Result<LookupEmbedder, RetrievalError> {
        let mut e = LookupEmbedder::new(self.dim());
        for (text, v) in &self.lookup {
            e.insert(text, v.clone())?;
        }
        Ok(e)
    }

    pub fn environment(&self, rollout: RolloutConfig) -> Result<Environment, EnvError> {
        let index = RetrievalIndex::new(
            Arc::new(self.catalog()),
            EmbeddingMatrix::from_rows(EmbeddingKind::Collaborative, &self.collaborative)?,
            EmbeddingMatrix::from_rows(EmbeddingKind::Textual, &self.textual)?,
            IndexConfig::default(),
        )?;
        let retriever = Retriever::new(
            Arc::new(index),
            Arc::new(self.embedder()?),
            HistoryEncoder::DecayedMean,
            rollout.mask_history,
        )?;
        Environment::new(retriever, RewardConfig::default(), rollout)
    }

    /// Writes items, embeddings, lookup table, samples and an `env.toml`
    /// pointing at them; returns the config path.
    pub fn write(&self, dir: &Path, rollout: &RolloutConfig) -> Result<PathBuf, IoError> {
        let catalog = self.catalog();
        write_jsonl(&dir.join("items.jsonl"), catalog.items())?;
        let collab = EmbeddingMatrix::from_rows(EmbeddingKind::Collaborative, &self.collaborative).expect("finite rows");
        let text = EmbeddingMatrix::from_rows(EmbeddingKind::Textual, &self.textual).expect("finite rows");
        write_atomic(&dir.join("collab.bin"), &collab.to_bytes())?;
        write_atomic(&dir.join("text.bin"), &text.to_bytes())?;
        let lookup: Vec<serde_json::Value> = self
            .lookup
            .iter()
            .map(|(t, v)| serde_json::json!({ "text": t, "vector": v }))
            .collect();
        write_jsonl(&dir.join("lookup.jsonl"), &lookup)?;
        write_jsonl(&dir.join("samples.jsonl"), &self.samples)?;
        let config = format!(
            "[corpus]\nitems = \"items.jsonl\"\nsamples = \"samples.jsonl\"\n\n\
             [retrieval]\ncollaborative = \"collab.bin\"\ntextual = \"text.bin\"\n\n\
             [text_encoder]\nkind = \"lookup\"\npath = \"lookup.jsonl\"\n\n\
             [rollout]\nmax_turns = {}\nk_retrieve = {}\nk_final = {}\nmask_history = {}\nseed = {}\nchar_budget = {}\n",
            rollout.max_turns,
            rollout.k_retrieve,
            rollout.k_final,
            rollout.mask_history,
            rollout.seed,
            rollout.char_budget
        );
        let path = dir.join("env.toml");
        write_atomic(&path, config.as_bytes())?;
        Ok(path)
    }
}
