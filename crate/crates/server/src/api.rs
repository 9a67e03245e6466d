//! Request and response bodies. All bodies are JSON.

use serde::{Deserialize, Serialize};

use recloop_core::protocol::{FormatReport, Trajectory, TrajectoryRecord};
use recloop_core::rewards::{RewardBreakdown, Stage};
use recloop_core::rollout::FinishReason;
use recloop_core::ItemId;

/// An item given either by numeric id or by external id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemRef {
    Id(ItemId),
    External(String),
}

/// Per-session rollout settings. `k_final` is fixed by the server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_turns: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_retrieve: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_history: Option<bool>,
}

/// `POST /v1/sessions`. Give the history as `items` (numeric ids) or
/// `external_ids`, not both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<ItemId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<i64>>,
    /// Held-out item the terminal rewards are computed against.
    pub label: ItemRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<Overrides>,
}

/// The policy's full context is `system_prompt + "\n\n" + initial_context`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub system_prompt: String,
    pub initial_context: String,
    pub expires_in_secs: u64,
}

/// `POST /v1/sessions/{id}/continue`. Without `finish_reason` the text is
/// treated as a partial chunk and more may follow. `stop` or `end` without a
/// stop marker in the text ends the episode as-is; `length` truncates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinueRequest {
    pub generated_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub item_id: ItemId,
    pub title: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ContinueResponse {
    /// Text appended; keep generating.
    Accepted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    Retrieval {
        injected_text: String,
        items: Vec<RetrievedItem>,
        m: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    Terminal {
        reward_breakdown: RewardBreakdown,
        trajectory: Trajectory,
        report: FormatReport,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    /// Turn or character cap reached; scored with the format penalty.
    Truncated {
        reward_breakdown: RewardBreakdown,
        trajectory: Trajectory,
        report: FormatReport,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    AwaitingGeneration,
    Terminal,
    Aborted,
}

/// `GET /v1/sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub state: SessionState,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub idle_secs: u64,
    pub expires_in_secs: u64,
}

/// `POST /v1/score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub trajectory: TrajectoryRecord,
    pub label: ItemId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
}
