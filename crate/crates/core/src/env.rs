//! The assembled environment: catalog, retriever and episode/reward settings.

use std::sync::Arc;
use std::time::Duration;

use crate::config::{Config, ConfigError, EncoderKind};
use crate::corpus::{load_catalog, Catalog, CorpusError};
use crate::retrieval::{
    build_index, HashedEmbedder, HistoryEncoder, LookupEmbedder, RemoteEmbedder, RetrievalError, Retriever,
    TextEmbedder, UserVectors,
};
use crate::rewards::{RewardConfig, RewardError};
use crate::rollout::{EpisodeError, RolloutConfig};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Rewards(#[from] RewardError),
    #[error(transparent)]
    Rollout(#[from] EpisodeError),
}

/// Shared read-only state for episodes, scoring and evaluation.
#[derive(Debug, Clone)]
pub struct Environment {
    retriever: Retriever,
    pub rewards: RewardConfig,
    pub rollout: RolloutConfig,
}

impl Environment {
    /// The final-list length for rewards always follows `rollout.k_final`.
    pub fn new(retriever: Retriever, mut rewards: RewardConfig, rollout: RolloutConfig) -> Result<Self, EnvError> {
        rollout.validate()?;
        rewards.list_len = rollout.k_final;
        rewards.validate()?;
        Ok(Environment {
            retriever,
            rewards,
            rollout,
        })
    }

    pub fn from_config(config: &Config) -> Result<Self, EnvError> {
        let catalog = Arc::new(load_catalog(Config::require(&config.corpus.items, "corpus.items")?)?);
        let r = &config.retrieval;
        let index = build_index(
            catalog,
            Config::require(&r.collaborative, "retrieval.collaborative")?,
            Config::require(&r.textual, "retrieval.textual")?,
            r.index_config(),
        )?;
        let dim = index.dim();
        let te = &config.text_encoder;
        let embedder: Arc<dyn TextEmbedder> = match te.kind {
            EncoderKind::Hashed => Arc::new(HashedEmbedder::new(dim)),
            EncoderKind::Lookup => Arc::new(LookupEmbedder::load(
                Config::require(&te.path, "text_encoder.path")?,
                dim,
            )?),
            EncoderKind::Remote => {
                let url = te
                    .url
                    .clone()
                    .ok_or_else(|| ConfigError::Missing("text_encoder.url is not set".into()))?;
                Arc::new(RemoteEmbedder::new(url, dim, Duration::from_secs(te.timeout_secs)))
            }
        };
        let history_encoder = match &r.user_vectors {
            Some(path) => HistoryEncoder::UserVectors(Arc::new(UserVectors::read(path)?)),
            None => HistoryEncoder::DecayedMean,
        };
        let retriever = Retriever::new(Arc::new(index), embedder, history_encoder, config.rollout.mask_history)?;
        Self::new(retriever, config.rewards, config.rollout)
    }

    pub fn catalog(&self) -> &Catalog {
        self.retriever.index().catalog()
    }

    pub fn retriever(&self) -> &Retriever {
        &self.retriever
    }
}
