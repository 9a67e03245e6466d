//! Blocking client for the session API, plus a driver that runs a local
//! policy through a remote episode.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use recloop_core::protocol::{StreamParser, STOP_MARKERS, THINK_OPEN};
use recloop_core::rewards::RewardBreakdown;
use recloop_core::rollout::{EpisodeInfo, EpisodeResult, Policy, PolicyError};
use recloop_core::{ItemRecord, SplitSample};

use crate::api::*;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Client {
            base: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn read<T: DeserializeOwned>(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<T, ClientError> {
        let mut resp = resp.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Status { status, body });
        }
        serde_json::from_str(&body).map_err(|e| ClientError::Protocol(format!("{e}: {body}")))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::read(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::read(self.agent.get(format!("{}{path}", self.base)).call())
    }

    pub fn create(&self, req: &CreateSession) -> Result<SessionCreated, ClientError> {
        self.post("/v1/sessions", req)
    }

    pub fn continue_(&self, session_id: &str, req: &ContinueRequest) -> Result<ContinueResponse, ClientError> {
        self.post(&format!("/v1/sessions/{session_id}/continue"), req)
    }

    pub fn snapshot(&self, session_id: &str) -> Result<SessionSnapshot, ClientError> {
        self.get(&format!("/v1/sessions/{session_id}"))
    }

    pub fn score(&self, req: &ScoreRequest) -> Result<RewardBreakdown, ClientError> {
        self.post("/v1/score", req)
    }

    pub fn item(&self, id: u32) -> Result<ItemRecord, ClientError> {
        self.get(&format!("/v1/items/{id}"))
    }

    /// Runs `policy` against a server-side session for `sample`. With the
    /// same environment config the result equals the in-process rollout.
    pub fn run_episode(
        &self,
        policy: &dyn Policy,
        sample: &SplitSample,
        info: &EpisodeInfo,
        char_budget: usize,
    ) -> Result<EpisodeResult, ClientError> {
        let created = self.create(&CreateSession {
            user_id: sample.history.user_id.clone(),
            items: Some(sample.history.items.clone()),
            external_ids: None,
            timestamps: sample.history.timestamps.clone(),
            label: ItemRef::Id(sample.label),
            overrides: None,
        })?;
        let mut context = format!("{}\n\n{}", created.system_prompt, created.initial_context);
        // mirrors the server's parser to know how much of each generation it consumes
        let mut parser = StreamParser::new();
        parser.feed(THINK_OPEN);
        let mut generated = 0usize;
        loop {
            let generation = policy.generate(info, &context, &STOP_MARKERS, char_budget.saturating_sub(generated))?;
            let consumed = &generation.text[..parser.feed(&generation.text).consumed];
            context.push_str(consumed);
            generated += consumed.chars().count();
            let resp = self.continue_(
                &created.session_id,
                &ContinueRequest {
                    generated_text: generation.text.clone(),
                    finish_reason: Some(generation.finish),
                },
            )?;
            let truncated = matches!(resp, ContinueResponse::Truncated { .. });
            match resp {
                ContinueResponse::Retrieval { injected_text, .. } => {
                    parser.feed(&injected_text);
                    context.push_str(&injected_text);
                }
                ContinueResponse::Terminal {
                    reward_breakdown,
                    trajectory,
                    report,
                    ..
                }
                | ContinueResponse::Truncated {
                    reward_breakdown,
                    trajectory,
                    report,
                    ..
                } => {
                    return Ok(EpisodeResult {
                        label: sample.label,
                        trajectory,
                        report,
                        rewards: reward_breakdown,
                        truncated,
                    })
                }
                ContinueResponse::Accepted { .. } => {
                    return Err(ClientError::Protocol(
                        "server awaits more text after a finished generation".into(),
                    ))
                }
            }
        }
    }
}
