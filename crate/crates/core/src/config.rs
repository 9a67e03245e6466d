//! TOML configuration. Relative paths resolve against the config file's directory.
//!
//! ```toml
//! [corpus]
//! items = "corpus/items.jsonl"
//! samples = "corpus/samples.jsonl"
//!
//! [retrieval]
//! collaborative = "emb/collab.bin"
//! textual = "emb/text.bin"
//! # user_vectors = "emb/users.bin"
//! scoring = "cosine"       # or "dot"
//! item_side = "fused"      # or "collaborative", "textual"
//! decay = 0.8
//!
//! [text_encoder]
//! kind = "hashed"          # or "lookup" (path), "remote" (url)
//!
//! [rewards]
//! max_invocations = 3
//! rank_step = 0.2
//! stage = "recommendation" # or "cold_start"
//!
//! [rollout]
//! max_turns = 8
//! k_retrieve = 20
//! k_final = 10
//! mask_history = true
//! seed = 0
//! char_budget = 32768
//!
//! [server]
//! port = 8080
//! session_ttl_secs = 600
//! max_sessions = 1024
//! request_timeout_secs = 30
//!
//! [eval]
//! ks = [5, 10]
//!
//! [ingest]
//! min_count = 5
//! min_rating = 3.0         # keep ratings strictly above
//! max_len = 20
//!
//! [select]
//! max_rank = 100
//! train_only = true
//!
//! [batch]
//! rollouts = 1
//! split = "test"           # "train", "valid", "test" or "all"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{IngestConfig, Split};
use crate::retrieval::{IndexConfig, ItemSide, ScoringMode};
use crate::rewards::RewardConfig;
use crate::rollout::RolloutConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Missing(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub items: Option<PathBuf>,
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub collaborative: Option<PathBuf>,
    pub textual: Option<PathBuf>,
    pub user_vectors: Option<PathBuf>,
    pub scoring: ScoringMode,
    pub item_side: ItemSide,
    pub decay: f64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let index = IndexConfig::default();
        RetrievalSection {
            collaborative: None,
            textual: None,
            user_vectors: None,
            scoring: index.scoring,
            item_side: index.item_side,
            decay: index.decay,
        }
    }
}

impl RetrievalSection {
    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            scoring: self.scoring,
            item_side: self.item_side,
            decay: self.decay,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Hashed,
    Lookup,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderSection {
    pub kind: EncoderKind,
    pub path: Option<PathBuf>,
    pub url: Option<String>,
    pub timeout_secs: u64,
}

impl Default for TextEncoderSection {
    fn default() -> Self {
        TextEncoderSection {
            kind: EncoderKind::Hashed,
            path: None,
            url: None,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub port: u16,
    pub session_ttl_secs: u64,
    pub max_sessions: usize,
    pub request_timeout_secs: u64,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            port: 8080,
            session_ttl_secs: 600,
            max_sessions: 1024,
            request_timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ks: vec![5, 10] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub max_rank: usize,
    /// Filter only train samples; valid and test pass through.
    pub train_only: bool,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            max_rank: 100,
            train_only: true,
        }
    }
}

/// Which samples a batch runs over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitFilter {
    Train,
    Valid,
    #[default]
    Test,
    All,
}

impl SplitFilter {
    pub fn admits(self, split: Split) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Train => split == Split::Train,
            SplitFilter::Valid => split == Split::Valid,
            SplitFilter::Test => split == Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub rollouts: usize,
    pub split: SplitFilter,
}

impl Default for BatchSection {
    fn default() -> Self {
        BatchSection {
            rollouts: 1,
            split: SplitFilter::Test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusPaths,
    pub retrieval: RetrievalSection,
    pub text_encoder: TextEncoderSection,
    pub rewards: RewardConfig,
    pub rollout: RolloutConfig,
    pub server: ServerSection,
    pub eval: EvalSection,
    pub ingest: IngestConfig,
    pub select: SelectSection,
    pub batch: BatchSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.corpus.items);
        fix(&mut self.corpus.samples);
        fix(&mut self.retrieval.collaborative);
        fix(&mut self.retrieval.textual);
        fix(&mut self.retrieval.user_vectors);
        fix(&mut self.text_encoder.path);
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, ConfigError> {
        value
            .as_deref()
            .ok_or_else(|| ConfigError::Missing(format!("{key} is not set")))
    }
}
