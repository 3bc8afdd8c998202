//! Sends prompts to a backend and parses the predicted POI.
//!
//! Two backends: a remote OpenAI-compatible chat-completions endpoint and a
//! deterministic local mock. The mock reads only the prompt text, exactly
//! like a real model, so ground truth cannot leak into predictions.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataset::PoiId;
use crate::prompting::{audit_prompt, PromptBundle, RenderedStay};

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("remote backend needs an endpoint and a model name")]
    MissingEndpoint,
    #[error("temperature must be non-negative, got {0}")]
    Temperature(f64),
    #[error("max_in_flight must be at least 1")]
    Concurrency,
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    /// The response was exactly a JSON answer.
    Ok,
    /// An id was extracted from a response with extra text around it.
    Recovered,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub place_id: Option<PoiId>,
    pub place_category: Option<String>,
    pub raw_response: String,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Prediction {
    pub fn failed(raw_response: impl Into<String>, error: Option<String>) -> Self {
        Self {
            place_id: None,
            place_category: None,
            raw_response: raw_response.into(),
            parse_status: ParseStatus::Failed,
            error,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockPolicy {
    /// The most frequent demonstration target (ties: smallest id).
    EchoMostFrequentDemoTarget,
    /// The demonstration target whose time of day is circularly nearest the
    /// task's target time (ties: smallest id).
    EchoDemoTargetMatchingHour,
    /// An id that is never a real POI.
    AlwaysWrong,
}

impl MockPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MockPolicy::EchoMostFrequentDemoTarget => "echo-most-frequent-demo-target",
            MockPolicy::EchoDemoTargetMatchingHour => "echo-demo-target-matching-hour",
            MockPolicy::AlwaysWrong => "always-wrong",
        }
    }
}

impl std::str::FromStr for MockPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo-most-frequent-demo-target" | "most-frequent" => Ok(MockPolicy::EchoMostFrequentDemoTarget),
            "echo-demo-target-matching-hour" | "matching-hour" => Ok(MockPolicy::EchoDemoTargetMatchingHour),
            "always-wrong" => Ok(MockPolicy::AlwaysWrong),
            other => Err(format!("unknown mock policy {other:?}")),
        }
    }
}

/// Dense ids are assigned from zero, so this value is never a real POI.
pub const NEVER_A_POI: PoiId = PoiId(u32::MAX);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// API base, e.g. `https://api.openai.com/v1`.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub api_key_env: Option<String>,
    /// First backoff delay; doubles on every retry.
    pub backoff_base_ms: u64,
    pub system_preamble: Option<String>,
    pub mock_policy: MockPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 60,
            max_in_flight: 4,
            api_key_env: None,
            backoff_base_ms: 500,
            system_preamble: None,
            mock_policy: MockPolicy::EchoMostFrequentDemoTarget,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::Temperature(self.temperature));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Concurrency);
        }
        if self.kind == BackendKind::Remote && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(GatewayError::MissingEndpoint);
        }
        Ok(())
    }

    /// Label used in reports, e.g. the model name or `mock:always-wrong`.
    pub fn model_label(&self) -> String {
        match self.kind {
            BackendKind::Remote => self.model.clone().unwrap_or_default(),
            BackendKind::Mock => format!("mock:{}", self.mock_policy.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum AttemptStatus {
    Ok,
    /// HTTP status that will be retried (429, 5xx) or was final.
    Http(u16),
    Transport(String),
    BadBody(String),
    Mock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: u32,
    pub latency_ms: f64,
    pub status: AttemptStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutcome {
    pub prediction: Prediction,
    pub attempts: Vec<Attempt>,
}

impl PredictOutcome {
    pub fn total_latency_ms(&self) -> f64 {
        self.attempts.iter().map(|a| a.latency_ms).sum()
    }
}

fn place_id_fallback() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"place_id['"]?\s*:\s*['"]?([0-9]+)"#).expect("valid regex"))
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Byte ranges of top-level balanced `{...}` spans, honouring JSON strings.
fn object_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let (mut depth, mut start) = (0usize, 0usize);
    let (mut in_str, mut escaped) = (false, false);
    for (i, ch) in text.char_indices() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' if depth > 0 => in_str = true,
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push((start, i + 1));
                }
            }
            _ => {}
        }
    }
    spans
}

fn read_place_id(v: &Value) -> Option<PoiId> {
    match v {
        Value::Number(n) => n.as_u64().and_then(|x| u32::try_from(x).ok()).map(PoiId),
        Value::String(s) => s.trim().parse().ok().map(PoiId),
        _ => None,
    }
}

pub fn parse_response(text: &str) -> Prediction {
    let stripped = strip_fences(text);
    for (start, end) in object_spans(&stripped) {
        let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&stripped[start..end]) else {
            continue;
        };
        let Some(place_id) = obj.get("place_id").and_then(read_place_id) else {
            continue;
        };
        let exact = stripped[..start].trim().is_empty()
            && stripped[end..].trim().is_empty()
            && matches!(obj.get("place_id"), Some(Value::Number(_)));
        return Prediction {
            place_id: Some(place_id),
            place_category: obj
                .get("place_category")
                .and_then(Value::as_str)
                .map(str::to_owned),
            raw_response: text.to_owned(),
            parse_status: if exact { ParseStatus::Ok } else { ParseStatus::Recovered },
            error: None,
        };
    }
    if let Some(id) = place_id_fallback()
        .captures(&stripped)
        .and_then(|c| c[1].parse().ok())
    {
        return Prediction {
            place_id: Some(PoiId(id)),
            place_category: None,
            raw_response: text.to_owned(),
            parse_status: ParseStatus::Recovered,
            error: None,
        };
    }
    Prediction::failed(text, Some("no place_id found".into()))
}

fn circular_minutes(a: u16, b: u16) -> u16 {
    let d = a.abs_diff(b);
    d.min(1440 - d)
}

/// Deterministic prediction computed from the prompt text alone.
pub fn mock_predict(bundle: &PromptBundle, policy: MockPolicy) -> Prediction {
    let audit = audit_prompt(&bundle.full_text);
    let stays: Vec<&RenderedStay> = if audit.demo_targets.is_empty() {
        audit.history.iter().collect()
    } else {
        audit.demo_targets.iter().collect()
    };
    let stays: Vec<&RenderedStay> = stays.into_iter().filter(|s| s.poi.is_some()).collect();
    if stays.is_empty() {
        return Prediction::failed("", Some("mock backend got a prompt without demonstrations".into()));
    }
    let pick: &RenderedStay = match policy {
        MockPolicy::AlwaysWrong => {
            return Prediction {
                place_id: Some(NEVER_A_POI),
                place_category: None,
                raw_response: format!("{{\"place_id\": {}}}", NEVER_A_POI.0),
                parse_status: ParseStatus::Ok,
                error: None,
            }
        }
        MockPolicy::EchoMostFrequentDemoTarget => {
            let mut counts: std::collections::BTreeMap<PoiId, usize> = Default::default();
            for s in &stays {
                *counts.entry(s.poi.expect("filtered")).or_default() += 1;
            }
            // BTreeMap iterates ascending, so `max_by_key` over (count, Reverse(id)) picks the smallest id on ties.
            let (&best, _) = counts
                .iter()
                .max_by_key(|(id, n)| (**n, std::cmp::Reverse(**id)))
                .expect("non-empty");
            stays.iter().find(|s| s.poi == Some(best)).expect("present")
        }
        MockPolicy::EchoDemoTargetMatchingHour => {
            let Some(target) = &audit.current_target else {
                return Prediction::failed("", Some("prompt has no <target_current> line".into()));
            };
            stays
                .iter()
                .min_by_key(|s| (circular_minutes(s.minute_of_day, target.minute_of_day), s.poi))
                .expect("non-empty")
        }
    };
    let id = pick.poi.expect("filtered");
    let raw = json!({"place_id": id.0, "place_category": pick.category}).to_string();
    Prediction {
        place_id: Some(id),
        place_category: Some(pick.category.clone()),
        raw_response: raw,
        parse_status: ParseStatus::Ok,
        error: None,
    }
}

/// A configured backend. Safe to share across worker threads.
pub struct Gateway {
    config: BackendConfig,
    api_key: Option<String>,
    agent: Option<ureq::Agent>,
    calls: AtomicU64,
}

impl Gateway {
    /// Validates the configuration and, for remote backends, resolves the API
    /// key. Fails before any request is made.
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let mut api_key = None;
        let mut agent = None;
        if config.kind == BackendKind::Remote {
            if let Some(var) = &config.api_key_env {
                api_key = Some(std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.clone()))?);
            }
            agent = Some(
                ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                    .http_status_as_error(false)
                    .build()
                    .into(),
            );
        }
        Ok(Self {
            config,
            api_key,
            agent,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Backend calls made so far (remote attempts or mock invocations).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn predict(&self, bundle: &PromptBundle) -> PredictOutcome {
        match self.config.kind {
            BackendKind::Mock => {
                self.calls.fetch_add(1, Ordering::Relaxed);
                let start = Instant::now();
                let prediction = mock_predict(bundle, self.config.mock_policy);
                PredictOutcome {
                    prediction,
                    attempts: vec![Attempt {
                        attempt: 1,
                        latency_ms: start.elapsed().as_secs_f64() * 1e3,
                        status: AttemptStatus::Mock,
                    }],
                }
            }
            BackendKind::Remote => self.predict_remote(bundle),
        }
    }

    fn predict_remote(&self, bundle: &PromptBundle) -> PredictOutcome {
        let mut attempts = Vec::new();
        let max_attempts = self.config.max_retries + 1;
        for attempt in 1..=max_attempts {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let start = Instant::now();
            let result = self.send_once(&bundle.full_text);
            let latency_ms = start.elapsed().as_secs_f64() * 1e3;
            let (status, retry, content) = match result {
                Ok(content) => (AttemptStatus::Ok, false, Some(content)),
                Err(status) => {
                    let retry = match &status {
                        AttemptStatus::Http(code) => *code == 429 || *code >= 500,
                        AttemptStatus::Transport(_) => true,
                        _ => false,
                    };
                    (status, retry, None)
                }
            };
            log::debug!("attempt {attempt}: {status:?} in {latency_ms:.1} ms");
            attempts.push(Attempt {
                attempt,
                latency_ms,
                status: status.clone(),
            });
            if let Some(content) = content {
                return PredictOutcome {
                    prediction: parse_response(&content),
                    attempts,
                };
            }
            if !retry {
                return PredictOutcome {
                    prediction: Prediction::failed("", Some(format!("request failed: {status:?}"))),
                    attempts,
                };
            }
            if attempt < max_attempts {
                let factor = 1u64 << (attempt - 1).min(16);
                std::thread::sleep(Duration::from_millis(self.config.backoff_base_ms.saturating_mul(factor)));
            }
        }
        PredictOutcome {
            prediction: Prediction::failed(
                "",
                Some(format!("retries exhausted after {max_attempts} attempts")),
            ),
            attempts,
        }
    }

    fn send_once(&self, prompt: &str) -> Result<String, AttemptStatus> {
        let agent = self.agent.as_ref().expect("remote backend has an agent");
        let endpoint = self.config.endpoint.as_deref().expect("validated");
        let url = format!("{}/chat/completions", endpoint.trim_end_matches('/'));
        let mut messages = Vec::new();
        if let Some(preamble) = &self.config.system_preamble {
            messages.push(json!({"role": "system", "content": preamble}));
        }
        messages.push(json!({"role": "user", "content": prompt}));
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let mut req = agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| AttemptStatus::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        if code != 200 {
            return Err(AttemptStatus::Http(code));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| AttemptStatus::BadBody(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| AttemptStatus::BadBody("missing choices[0].message.content".into()))
    }
}

/// One line of the per-attempt transcript log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub task_id: u32,
    pub cell: String,
    pub attempt: u32,
    pub latency_ms: f64,
    pub status: AttemptStatus,
}
