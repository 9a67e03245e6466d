//! Environment engine for multi-turn reasoning-retrieval recommendation.
//!
//! A policy (usually an LLM) reasons about a user's interaction history and
//! emits preference descriptions inside tagged blocks. Each preference is
//! fused with a history encoding to query an embedding index; the retrieved
//! items are injected back into the context. The episode ends with a ranked
//! recommendation list that is validated and scored by a hierarchical
//! rule-based reward suite.
//!
//! Module map:
//! - [`corpus`]: catalog loading, interaction ingestion, leave-one-out splits,
//!   difficulty-based selection.
//! - [`protocol`]: tag vocabulary, streaming parser, trajectory validation.
//! - [`retrieval`]: embedding files, text embedders, preference-aware top-k.
//! - [`rewards`]: process- and outcome-level rewards and stage totals.
//! - [`rollout`]: episode state machine, policies, batched rollouts.
//! - [`eval`]: Recall/NDCG over the full item space and over final lists.

pub mod config;
pub mod corpus;
pub mod env;
pub mod eval;
pub mod io;
pub mod protocol;
pub mod retrieval;
pub mod rewards;
pub mod rollout;
pub mod synthetic;

pub use config::Config;
pub use corpus::{Catalog, InteractionSequence, ItemId, ItemRecord, Split, SplitSample};
pub use env::Environment;
pub use protocol::{FormatReport, Trajectory, Turn};
pub use retrieval::{RetrievalIndex, Retriever};
pub use rewards::{RewardBreakdown, RewardConfig, Stage};
pub use rollout::{EpisodeResult, Policy, RolloutConfig};
