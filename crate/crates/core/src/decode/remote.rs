//! Chat-completions HTTP backend with a per-token logit-bias map.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{Backend, BackendCapability};
use super::tokenizer::TokenId;
use super::DecodeError;
use crate::prompt::Prompt;

/// Output-format instruction sent as the system message.
pub const SYSTEM_INSTRUCTION: &str = "Answer with the matching intent labels separated by `;`. \
Attach slot values in parentheses when present, e.g. `Label(slot=value, slot=value); Label`.";

#[derive(Clone, PartialEq)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub max_in_flight: usize,
    pub max_tokens: u32,
}

// keeps the key out of logs
impl fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("retries", &self.retries)
            .field("max_in_flight", &self.max_in_flight)
            .field("max_tokens", &self.max_tokens)
            .finish()
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    logit_bias: BTreeMap<String, f64>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct ChatCompletionsBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl ChatCompletionsBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        ChatCompletionsBackend { cfg, agent }
    }

    fn send_once(&self, body: &ChatRequest<'_>) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.cfg.url).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {}", text.trim())));
        }
        let parsed: ChatResponse =
            resp.body_mut().read_json().map_err(|e| Attempt::Fatal(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| Attempt::Fatal("response has no choices".into()))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl Backend for ChatCompletionsBackend {
    fn name(&self) -> &str {
        "chat-completions"
    }

    fn capability(&self) -> BackendCapability {
        BackendCapability { exposes_logits: false, supports_bias_map: true, provides_pooled_state: false }
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight.max(1)
    }

    fn complete(&self, prompt: &Prompt, bias: &BTreeMap<TokenId, f64>) -> Result<String, DecodeError> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![
                ChatMessage { role: "system", content: SYSTEM_INSTRUCTION },
                ChatMessage { role: "user", content: &prompt.text },
            ],
            logit_bias: bias.iter().map(|(t, b)| (t.to_string(), *b)).collect(),
            temperature: 0.0,
            max_tokens: self.cfg.max_tokens,
        };
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << (attempt - 1).min(6)));
            }
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => return Err(DecodeError::BackendUnavailable(msg)),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("{} attempt {} failed: {msg}", self.cfg.url, attempt + 1);
                    last = msg;
                }
            }
        }
        Err(DecodeError::BackendUnavailable(format!(
            "{} failed after {} attempts: {last}",
            self.cfg.url,
            self.cfg.retries + 1
        )))
    }
}
