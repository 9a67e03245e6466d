//! Multi-turn episode driver.
//!
//! [`Episode`] is a push-style state machine: callers submit generated text
//! and get back either nothing to do, an item-list injection, or the scored
//! result. [`run_episode`] drives it with an in-process [`Policy`]; the HTTP
//! service drives the same machine with text submitted by remote clients.

mod policy;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use policy::{
    make_policy, observed_item_lists, EpisodeInfo, FinalSelection, FinishReason, Generation, OraclePolicy, Policy,
    PolicyError, RandomPolicy, RemotePolicy, Template, TemplatePolicy, TemplateTurn,
};

use crate::corpus::{InteractionSequence, ItemId, SplitSample};
use crate::env::Environment;
use crate::protocol::{
    inject_item_list, parse_trajectory, render_initial_context, render_system_prompt, EventKind, FormatReport,
    Stop, StreamParser, Trajectory, THINK_OPEN,
};
use crate::retrieval::{RetrievalError, Scored};
use crate::rewards::{score_trajectory, RewardBreakdown, RewardError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Preference blocks allowed before the episode is cut off.
    pub max_turns: usize,
    pub k_retrieve: usize,
    pub k_final: usize,
    pub mask_history: bool,
    pub seed: u64,
    /// Characters of policy output allowed per episode; injections do not count.
    pub char_budget: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_turns: 8,
            k_retrieve: 20,
            k_final: 10,
            mask_history: true,
            seed: 0,
            char_budget: 32_768,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.max_turns == 0 || self.k_retrieve == 0 || self.k_final == 0 || self.char_budget == 0 {
            return Err(EpisodeError::Config(
                "max_turns, k_retrieve, k_final and char_budget must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("policy failed: {0}")]
    Policy(#[from] PolicyError),
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("scoring failed: {0}")]
    Scoring(#[from] RewardError),
    #[error("episode already finished")]
    Finished,
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("history item {0} is not in the catalog")]
    UnknownItem(ItemId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub label: ItemId,
    pub trajectory: Trajectory,
    pub report: FormatReport,
    pub rewards: RewardBreakdown,
    /// Cut off by the turn cap or the character budget.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// Text accepted; the policy should keep generating.
    Continue,
    /// A preference block closed; `injected` was appended to the context.
    Retrieval { injected: String, items: Vec<Scored> },
    Finished(Box<EpisodeResult>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: Step,
    /// Bytes of the submitted text after a stop marker, discarded.
    pub ignored_bytes: usize,
}

/// Server-side state of one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    history: InteractionSequence,
    label: ItemId,
    config: RolloutConfig,
    parser: StreamParser,
    context: String,
    response_start: usize,
    preference: String,
    invocations: usize,
    generated_chars: usize,
    finished: bool,
}

impl Episode {
    pub fn new(env: &Environment, history: InteractionSequence, label: ItemId) -> Result<Self, EpisodeError> {
        Self::with_config(env, history, label, env.rollout)
    }

    /// Like [`Episode::new`] with per-episode rollout settings. `k_final`
    /// must match the environment's, since rewards are computed against it.
    pub fn with_config(
        env: &Environment,
        history: InteractionSequence,
        label: ItemId,
        config: RolloutConfig,
    ) -> Result<Self, EpisodeError> {
        config.validate()?;
        if config.k_final != env.rollout.k_final {
            return Err(EpisodeError::Config(format!(
                "k_final {} differs from the environment's {}",
                config.k_final, env.rollout.k_final
            )));
        }
        let catalog = env.catalog();
        for &id in history.items.iter().chain(std::iter::once(&label)) {
            if !catalog.contains(id) {
                return Err(EpisodeError::UnknownItem(id));
            }
        }
        let mut context = render_system_prompt(config.k_final);
        context.push_str("\n\n");
        context.push_str(&render_initial_context(history.items.iter().map(|&i| catalog.title(i))));
        let response_start = context.len() - THINK_OPEN.len();
        let mut parser = StreamParser::new();
        parser.feed(THINK_OPEN);
        Ok(Episode {
            history,
            label,
            config,
            parser,
            context,
            response_start,
            preference: String::new(),
            invocations: 0,
            generated_chars: 0,
            finished: false,
        })
    }

    pub fn from_sample(env: &Environment, sample: &SplitSample) -> Result<Self, EpisodeError> {
        Self::new(env, sample.history.clone(), sample.label)
    }

    /// Everything the policy conditions on: system prompt, user turn, response so far.
    pub fn context(&self) -> &str {
        &self.context
    }

    /// The response part of the context, starting at the opening think tag.
    pub fn response(&self) -> &str {
        &self.context[self.response_start..]
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn remaining_budget(&self) -> usize {
        self.config.char_budget.saturating_sub(self.generated_chars)
    }

    pub fn history(&self) -> &InteractionSequence {
        &self.history
    }

    pub fn label(&self) -> ItemId {
        self.label
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.config
    }

    pub fn submit(&mut self, env: &Environment, text: &str) -> Result<StepOutcome, EpisodeError> {
        if self.finished {
            return Err(EpisodeError::Finished);
        }
        let feed = self.parser.feed(text);
        let consumed = &text[..feed.consumed];
        self.context.push_str(consumed);
        self.generated_chars += consumed.chars().count();
        for e in &feed.events {
            match e.kind {
                EventKind::PrefOpen => self.preference.clear(),
                EventKind::PrefText => self.preference.push_str(&e.payload),
                _ => {}
            }
        }
        let ignored_bytes = text.len() - feed.consumed;
        let exhausted = self.generated_chars >= self.config.char_budget;
        let step = match feed.stop {
            Some(Stop::AtRecClose) => self.finish(env, false)?,
            Some(Stop::AtPrefClose) => {
                self.invocations += 1;
                if self.invocations > self.config.max_turns || exhausted {
                    self.finish(env, true)?
                } else {
                    self.inject(env)?
                }
            }
            None if exhausted => self.finish(env, true)?,
            None => Step::Continue,
        };
        Ok(StepOutcome { step, ignored_bytes })
    }

    fn inject(&mut self, env: &Environment) -> Result<Step, EpisodeError> {
        let retriever = env.retriever();
        let preference = std::mem::take(&mut self.preference);
        let query = retriever.query(&self.history, Some(preference.trim()))?;
        let mask = if self.config.mask_history {
            self.history.items.clone()
        } else {
            Vec::new()
        };
        let items = retriever.index().retrieve_top_k(&query, self.config.k_retrieve, &mask)?;
        let catalog = env.catalog();
        let injected = inject_item_list(items.iter().map(|s| catalog.get(s.item).expect("retrieved id in catalog")));
        let feed = self.parser.feed(&injected);
        debug_assert!(feed.stop.is_none() && feed.consumed == injected.len());
        self.context.push_str(&injected);
        Ok(Step::Retrieval { injected, items })
    }

    /// The policy stopped without closing the recommendation list.
    pub fn end_generation(&mut self, env: &Environment) -> Result<EpisodeResult, EpisodeError> {
        self.close(env, false)
    }

    /// The policy ran out of budget mid-generation.
    pub fn truncate(&mut self, env: &Environment) -> Result<EpisodeResult, EpisodeError> {
        self.close(env, true)
    }

    fn finish(&mut self, env: &Environment, truncated: bool) -> Result<Step, EpisodeError> {
        Ok(Step::Finished(Box::new(self.close(env, truncated)?)))
    }

    fn close(&mut self, env: &Environment, truncated: bool) -> Result<EpisodeResult, EpisodeError> {
        if self.finished {
            return Err(EpisodeError::Finished);
        }
        self.finished = true;
        self.parser.finish();
        let (mut trajectory, report) = parse_trajectory(self.response(), env.catalog(), self.config.k_final);
        trajectory.history = self.history.clone();
        let rewards = score_trajectory(&trajectory, &report, self.label, env.retriever(), &env.rewards)?;
        debug_assert!(!truncated || rewards.format == -1.0);
        Ok(EpisodeResult {
            label: self.label,
            trajectory,
            report,
            rewards,
            truncated,
        })
    }
}

/// Runs one episode to completion with an in-process policy.
pub fn run_episode(
    policy: &dyn Policy,
    env: &Environment,
    sample: &SplitSample,
    info: &EpisodeInfo,
) -> Result<EpisodeResult, EpisodeError> {
    let mut episode = Episode::from_sample(env, sample)?;
    loop {
        let generation = policy.generate(info, episode.context(), &crate::protocol::STOP_MARKERS, episode.remaining_budget())?;
        let outcome = episode.submit(env, &generation.text)?;
        match outcome.step {
            Step::Finished(result) => return Ok(*result),
            Step::Retrieval { .. } => {}
            Step::Continue => {
                return match generation.finish {
                    FinishReason::Length => episode.truncate(env),
                    FinishReason::Stop | FinishReason::End => episode.end_generation(env),
                }
            }
        }
    }
}

/// One line of a batch output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub sample_index: usize,
    pub repeat: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<EpisodeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-episode seed from the batch seed and the (sample, repeat) position.
pub fn derive_seed(seed: u64, sample_index: usize, repeat: usize) -> u64 {
    mix(seed ^ mix(((sample_index as u64) << 32) | repeat as u64))
}

/// `rollouts_per_sample` episodes for every sample, ordered by sample then
/// repeat. Failed episodes are recorded, not propagated.
pub fn run_batch(
    policy: &dyn Policy,
    env: &Environment,
    samples: &[SplitSample],
    rollouts_per_sample: usize,
) -> Vec<BatchEntry> {
    let seed = env.rollout.seed;
    (0..samples.len() * rollouts_per_sample)
        .into_par_iter()
        .map(|n| {
            let (i, r) = (n / rollouts_per_sample, n % rollouts_per_sample);
            let info = EpisodeInfo::new(env, &samples[i], i, r, derive_seed(seed, i, r));
            let outcome = run_episode(policy, env, &samples[i], &info);
            BatchEntry {
                sample_index: i,
                repeat: r,
                seed: info.seed,
                error: outcome.as_ref().err().map(|e| e.to_string()),
                result: outcome.ok(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_position() {
        let a = derive_seed(7, 0, 0);
        assert_ne!(a, derive_seed(7, 0, 1));
        assert_ne!(a, derive_seed(7, 1, 0));
        assert_ne!(a, derive_seed(8, 0, 0));
        assert_eq!(a, derive_seed(7, 0, 0));
    }

    #[test]
    fn config_validation() {
        assert!(RolloutConfig::default().validate().is_ok());
        let bad = RolloutConfig {
            max_turns: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
