use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AgentError, AgentRole, Message, Result};

/// Bearer token for the chat endpoint.
pub const API_KEY_ENV: &str = "BEAMLOOP_API_KEY";
/// Chat-completions URL used when the config names none.
pub const LLM_URL_ENV: &str = "BEAMLOOP_LLM_URL";

/// Anything that can answer a chat transcript.
pub trait ChatBackend {
    fn complete(&mut self, role: AgentRole, messages: &[Message]) -> Result<String>;

    /// Requests sent so far, retries included.
    fn requests(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "http-chat" | "http" => Ok(BackendKind::HttpChat),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend {other:?} (expected http-chat or mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Full chat-completions URL; falls back to `BEAMLOOP_LLM_URL`.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: f64,
    /// Extra attempts after the first failed one.
    pub max_retries: u32,
    pub temperature: f64,
    /// Mock script file.
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            timeout_secs: 60.0,
            max_retries: 2,
            temperature: 0.0,
            script: None,
        }
    }
}

impl BackendConfig {
    pub fn mock(script: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Mock,
            script: Some(script.into()),
            ..Self::default()
        }
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<Box<dyn ChatBackend>> {
        match self.kind {
            BackendKind::Mock => {
                let path = self
                    .script
                    .as_ref()
                    .ok_or_else(|| AgentError::InvalidBackend("mock backend needs a script".into()))?;
                Ok(Box::new(MockBackend::new(MockScript::load(path)?)))
            }
            BackendKind::HttpChat => Ok(Box::new(HttpChat::from_config(self)?)),
        }
    }
}

/// OpenAI-style chat-completions client.
#[derive(Debug)]
pub struct HttpChat {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    max_retries: u32,
    temperature: f64,
    agent: ureq::Agent,
    requests: usize,
}

impl HttpChat {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .or_else(|| std::env::var(LLM_URL_ENV).ok())
            .filter(|e| !e.trim().is_empty())
            .ok_or_else(|| AgentError::InvalidBackend(format!("http-chat needs an endpoint (or {LLM_URL_ENV})")))?;
        let model = cfg
            .model
            .clone()
            .filter(|m| !m.trim().is_empty())
            .ok_or_else(|| AgentError::InvalidBackend("http-chat needs a model name".into()))?;
        if !(cfg.timeout_secs.is_finite() && cfg.timeout_secs > 0.0) {
            return Err(AgentError::InvalidBackend(format!(
                "timeout must be positive, got {}",
                cfg.timeout_secs
            )));
        }
        let timeout = Duration::from_secs_f64(cfg.timeout_secs);
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint,
            model,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout,
            max_retries: cfg.max_retries,
            temperature: cfg.temperature,
            agent,
            requests: 0,
        })
    }

    fn send_once(&mut self, body: &str) -> Result<String> {
        self.requests += 1;
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| self.transport_error(e))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| self.transport_error(e))?;
        if !(200..300).contains(&status) {
            return Err(AgentError::Http {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| AgentError::BadResponse(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AgentError::BadResponse("no choices[0].message.content".into()))
    }

    fn transport_error(&self, e: ureq::Error) -> AgentError {
        let timed_out = match &e {
            ureq::Error::Timeout(_) => true,
            ureq::Error::Io(io) => matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock),
            _ => false,
        };
        if timed_out {
            AgentError::Timeout {
                endpoint: self.endpoint.clone(),
                seconds: self.timeout.as_secs_f64(),
            }
        } else {
            AgentError::Transport(e.to_string())
        }
    }
}

fn retryable(e: &AgentError) -> bool {
    match e {
        AgentError::Timeout { .. } | AgentError::Transport(_) => true,
        AgentError::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ChatBackend for HttpChat {
    fn complete(&mut self, _role: AgentRole, messages: &[Message]) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        })
        .to_string();
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.max_retries && retryable(&e) => {
                    log::warn!("chat request attempt {} failed: {e}; retrying", attempt + 1);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn requests(&self) -> usize {
        self.requests
    }
}

/// Scripted replies per role, consumed in order. Replies may be strings
/// (returned verbatim) or JSON values (returned compactly serialized).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub id: String,
    pub replies: BTreeMap<AgentRole, Vec<Value>>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| AgentError::BadFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn reply(&self, role: AgentRole, step: usize) -> Option<String> {
        self.replies.get(&role)?.get(step).map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }
}

/// Deterministic backend for tests and offline runs. Never touches the
/// network.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
    cursor: BTreeMap<AgentRole, usize>,
    /// Every transcript received, in order.
    pub calls: Vec<(AgentRole, Vec<Message>)>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            cursor: BTreeMap::new(),
            calls: Vec::new(),
        }
    }

    /// Replies consumed so far for `role`.
    pub fn consumed(&self, role: AgentRole) -> usize {
        self.cursor.get(&role).copied().unwrap_or(0)
    }
}

impl ChatBackend for MockBackend {
    fn complete(&mut self, role: AgentRole, messages: &[Message]) -> Result<String> {
        let step = self.consumed(role);
        let reply = self
            .script
            .reply(role, step)
            .ok_or(AgentError::ScriptExhausted { role, step })?;
        self.cursor.insert(role, step + 1);
        self.calls.push((role, messages.to_vec()));
        Ok(reply)
    }

    fn requests(&self) -> usize {
        self.calls.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script() -> MockScript {
        serde_json::from_str(r#"{"id":"t","replies":{"spa":["PLAN: fly low",{"thought":"x"}],"taa":[]}}"#).unwrap()
    }

    #[test]
    fn mock_replies_verbatim_then_exhausts() {
        let mut b = MockBackend::new(script());
        let msgs = [Message::user("hi")];
        assert_eq!(b.complete(AgentRole::Spa, &msgs).unwrap(), "PLAN: fly low");
        assert_eq!(b.complete(AgentRole::Spa, &msgs).unwrap(), r#"{"thought":"x"}"#);
        assert!(matches!(
            b.complete(AgentRole::Spa, &msgs),
            Err(AgentError::ScriptExhausted { role: AgentRole::Spa, step: 2 })
        ));
        assert!(matches!(
            b.complete(AgentRole::Caa, &msgs),
            Err(AgentError::ScriptExhausted { step: 0, .. })
        ));
        assert_eq!(b.requests(), 2);
    }

    #[test]
    fn config_requirements() {
        let cfg = BackendConfig {
            kind: BackendKind::Mock,
            ..BackendConfig::default()
        };
        assert!(matches!(cfg.build(), Err(AgentError::InvalidBackend(_))));
        let cfg = BackendConfig {
            kind: BackendKind::HttpChat,
            endpoint: Some("http://127.0.0.1:9/v1/chat/completions".into()),
            model: None,
            ..BackendConfig::default()
        };
        assert!(matches!(cfg.build(), Err(AgentError::InvalidBackend(_))));
        let mut cfg = BackendConfig::http("http://127.0.0.1:9/x", "m");
        cfg.timeout_secs = 0.0;
        assert!(cfg.build().is_err());
        assert_eq!("http-chat".parse::<BackendKind>().unwrap(), BackendKind::HttpChat);
        let json = r#"{"kind":"http-chat","endpoint":"http://h/x","model":"m"}"#;
        let cfg: BackendConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.max_retries, 2);
    }
}
