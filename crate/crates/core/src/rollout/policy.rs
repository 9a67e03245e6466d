//! Policies: in-process scripted generators and a remote completion client.

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitSample;
use crate::env::Environment;
use crate::protocol::{
    parse_all, strip_numbering, EventKind, PREF_CLOSE, PREF_OPEN, REC_CLOSE, REC_OPEN, THINK_CLOSE, THINK_OPEN,
};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy config: {0}")]
    Config(String),
    #[error("policy transport: {0}")]
    Transport(String),
    #[error("policy needs the label title, which this episode does not expose")]
    MissingLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// Stopped at (after) a stop marker.
    Stop,
    /// Ran into the budget.
    Length,
    /// Stopped on its own without a marker.
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub finish: FinishReason,
}

/// Per-episode facts a policy may condition on besides the context text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInfo {
    pub sample_index: usize,
    pub repeat: usize,
    pub seed: u64,
    pub history_titles: Vec<String>,
    /// Only scripted oracles should read this.
    pub label_title: Option<String>,
    pub k_final: usize,
}

impl EpisodeInfo {
    pub fn new(env: &Environment, sample: &SplitSample, sample_index: usize, repeat: usize, seed: u64) -> Self {
        let catalog = env.catalog();
        EpisodeInfo {
            sample_index,
            repeat,
            seed,
            history_titles: sample
                .history
                .items
                .iter()
                .map(|&i| catalog.get(i).map(|r| r.title.clone()).unwrap_or_default())
                .collect(),
            label_title: catalog.get(sample.label).map(|r| r.title.clone()),
            k_final: env.rollout.k_final,
        }
    }
}

pub trait Policy: Send + Sync + fmt::Debug {
    /// Continues `context`. Text past the first stop marker is discarded by
    /// the caller. `budget` is the number of characters still allowed.
    fn generate(
        &self,
        info: &EpisodeInfo,
        context: &str,
        stop_markers: &[&str],
        budget: usize,
    ) -> Result<Generation, PolicyError>;
}

/// Item lists injected so far in the response part of `context`, numbering stripped.
pub fn observed_item_lists(context: &str) -> Vec<Vec<String>> {
    let response = context.rfind(THINK_OPEN).map_or(context, |p| &context[p..]);
    let mut lists = Vec::new();
    let mut current: Option<Vec<String>> = None;
    for e in parse_all(response) {
        match e.kind {
            EventKind::ItemsOpen => current = Some(Vec::new()),
            EventKind::ItemLine => {
                if let Some(list) = current.as_mut() {
                    let line = strip_numbering(e.line().trim());
                    if !line.is_empty() {
                        list.push(line.to_string());
                    }
                }
            }
            EventKind::ItemsClose => lists.extend(current.take()),
            _ => {}
        }
    }
    lists
}

fn clip(text: String, budget: usize, finish: FinishReason) -> Generation {
    match text.char_indices().nth(budget) {
        Some((cut, _)) => Generation {
            text: text[..cut].to_string(),
            finish: FinishReason::Length,
        },
        None => Generation { text, finish },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateTurn {
    #[serde(default)]
    pub thought: String,
    pub preference: String,
}

/// How the closing recommendation list is assembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FinalSelection {
    /// Fixed titles, emitted verbatim.
    Titles { titles: Vec<String> },
    /// Leading titles of one injected list (clamped to the last list).
    CopyTurn { turn: usize },
    /// First title of each list, then the second of each, and so on, without repeats.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub turns: Vec<TemplateTurn>,
    #[serde(default)]
    pub closing_thought: String,
    #[serde(rename = "final", default = "round_robin")]
    pub final_selection: FinalSelection,
}

fn round_robin() -> FinalSelection {
    FinalSelection::RoundRobin
}

impl Template {
    fn select(&self, lists: &[Vec<String>], k: usize) -> Vec<String> {
        match &self.final_selection {
            FinalSelection::Titles { titles } => titles.clone(),
            FinalSelection::CopyTurn { turn } => match lists.get((*turn).min(lists.len().saturating_sub(1))) {
                Some(list) => list.iter().take(k).cloned().collect(),
                None => Vec::new(),
            },
            FinalSelection::RoundRobin => {
                let mut out: Vec<String> = Vec::new();
                let depth = lists.iter().map(Vec::len).max().unwrap_or(0);
                'outer: for d in 0..depth {
                    for list in lists {
                        if out.len() == k {
                            break 'outer;
                        }
                        if let Some(t) = list.get(d) {
                            if !out.contains(t) {
                                out.push(t.clone());
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Next chunk: the preference block for the next unserved turn, or the
    /// closing thought plus the recommendation list.
    pub fn next_chunk(&self, context: &str, k: usize) -> String {
        let lists = observed_item_lists(context);
        match self.turns.get(lists.len()) {
            Some(turn) => format!("\n{}\n{PREF_OPEN}{}{PREF_CLOSE}", turn.thought, turn.preference),
            None => {
                let titles = self.select(&lists, k);
                let mut text = format!("\n{}\n{THINK_CLOSE}\n{REC_OPEN}\n", self.closing_thought);
                for t in titles {
                    text.push_str(&t);
                    text.push('\n');
                }
                text.push_str(REC_CLOSE);
                text
            }
        }
    }
}

/// Replays a fixed script.
#[derive(Debug, Clone)]
pub struct TemplatePolicy {
    template: Template,
}

impl TemplatePolicy {
    pub fn new(template: Template) -> Self {
        TemplatePolicy { template }
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Config(format!("{}: {e}", path.display())))?;
        let template: Template =
            serde_json::from_str(&text).map_err(|e| PolicyError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(template))
    }

    pub fn template(&self) -> &Template {
        &self.template
    }
}

impl Policy for TemplatePolicy {
    fn generate(&self, info: &EpisodeInfo, context: &str, _: &[&str], budget: usize) -> Result<Generation, PolicyError> {
        Ok(clip(self.template.next_chunk(context, info.k_final), budget, FinishReason::Stop))
    }
}

/// Asks for the label by title once, then copies the first injected list.
#[derive(Debug, Clone, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn generate(&self, info: &EpisodeInfo, context: &str, _: &[&str], budget: usize) -> Result<Generation, PolicyError> {
        let label = info.label_title.clone().ok_or(PolicyError::MissingLabel)?;
        let template = Template {
            turns: vec![TemplateTurn {
                thought: "The next item should resemble the held-out one.".into(),
                preference: label,
            }],
            closing_thought: "Keep the retrieved order.".into(),
            final_selection: FinalSelection::CopyTurn { turn: 0 },
        };
        Ok(clip(template.next_chunk(context, info.k_final), budget, FinishReason::Stop))
    }
}

const WORDS: &[&str] = &[
    "action", "adventure", "animated", "classic", "comedy", "cozy", "crime", "dark", "documentary", "drama",
    "epic", "family", "fantasy", "funny", "gritty", "heist", "historical", "horror", "indie", "light",
    "mystery", "noir", "quiet", "romance", "satire", "science", "space", "sports", "spy", "strategy",
    "surreal", "suspense", "thriller", "tragic", "upbeat", "war", "western", "whimsical", "witty", "young",
];

/// Random word-salad preferences, one to three turns, shuffled union as the final list.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    seed: u64,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy { seed }
    }
}

impl Policy for RandomPolicy {
    fn generate(&self, info: &EpisodeInfo, context: &str, _: &[&str], budget: usize) -> Result<Generation, PolicyError> {
        // the whole script is re-derived on every call so each call is a pure function of its inputs
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ info.seed);
        let n_turns = rng.gen_range(1..=3);
        let turns = (0..n_turns)
            .map(|i| {
                let n_words = rng.gen_range(2..=4);
                let words: Vec<&str> = (0..n_words).map(|_| *WORDS.choose(&mut rng).expect("non-empty")).collect();
                TemplateTurn {
                    thought: format!("Guess {}.", i + 1),
                    preference: words.join(" "),
                }
            })
            .collect();
        let lists = observed_item_lists(context);
        let mut pool: Vec<String> = Vec::new();
        for t in lists.iter().flatten() {
            if !pool.contains(t) {
                pool.push(t.clone());
            }
        }
        pool.shuffle(&mut rng);
        pool.truncate(info.k_final);
        let template = Template {
            turns,
            closing_thought: "Picking from what came back.".into(),
            final_selection: FinalSelection::Titles { titles: pool },
        };
        Ok(clip(template.next_chunk(context, info.k_final), budget, FinishReason::Stop))
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    context: &'a str,
    stop: &'a [&'a str],
    budget: usize,
    temperature: f64,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct CompletionChunk {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<FinishReason>,
}

/// Completion client. Request: `POST url` with
/// `{"context", "stop", "budget", "temperature", "seed"}`. Response: one or
/// more lines of `{"text", "finish_reason"}`; texts are concatenated and the
/// last finish reason wins (`stop` when absent).
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    url: String,
    temperature: f64,
    agent: ureq::Agent,
}

impl RemotePolicy {
    /// Connects and performs a `GET url` handshake that must succeed.
    pub fn connect(url: impl Into<String>, temperature: f64, timeout: Duration) -> Result<Self, PolicyError> {
        let url = url.into();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        agent
            .get(&url)
            .call()
            .map_err(|e| PolicyError::Transport(format!("handshake with {url}: {e}")))?;
        Ok(RemotePolicy { url, temperature, agent })
    }
}

impl Policy for RemotePolicy {
    fn generate(
        &self,
        info: &EpisodeInfo,
        context: &str,
        stop_markers: &[&str],
        budget: usize,
    ) -> Result<Generation, PolicyError> {
        let body = self
            .agent
            .post(&self.url)
            .send_json(CompletionRequest {
                context,
                stop: stop_markers,
                budget,
                temperature: self.temperature,
                seed: info.seed,
            })
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        let mut text = String::new();
        let mut finish = FinishReason::Stop;
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let chunk: CompletionChunk =
                serde_json::from_str(line).map_err(|e| PolicyError::Transport(format!("bad response line: {e}")))?;
            text.push_str(&chunk.text);
            if let Some(f) = chunk.finish_reason {
                finish = f;
            }
        }
        Ok(clip(text, budget, finish))
    }
}

/// Builds a policy from `template:<file>`, `oracle`, `random:<seed>` or `remote:<url>`.
pub fn make_policy(spec: &str) -> Result<Arc<dyn Policy>, PolicyError> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match (kind, arg) {
        ("oracle", "") => Ok(Arc::new(OraclePolicy)),
        ("template", path) if !path.is_empty() => Ok(Arc::new(TemplatePolicy::load(Path::new(path))?)),
        ("random", seed) => {
            let seed = seed
                .parse()
                .map_err(|_| PolicyError::Config(format!("random policy needs an integer seed, got {seed:?}")))?;
            Ok(Arc::new(RandomPolicy::new(seed)))
        }
        ("remote", url) if !url.is_empty() => Ok(Arc::new(RemotePolicy::connect(url, 1.0, Duration::from_secs(60))?)),
        _ => Err(PolicyError::Config(format!("unknown policy spec {spec:?}"))),
    }
}
