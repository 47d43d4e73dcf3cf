//! Conversation backends: scripted replay and a chat-completion HTTP client.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::AgentError;
use crate::log::{AgentRole, TokenUsage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
    pub latency_ms: Option<u64>,
    pub attempts: u32,
}

pub trait ChatBackend: Send {
    /// Sends `messages` on behalf of `role` in `round`.
    fn chat(&mut self, role: AgentRole, round: u32, messages: &[ChatMessage]) -> Result<ChatReply, AgentError>;
}

/// What a scripted entry does when consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptedFault {
    #[default]
    None,
    /// Behaves like a live backend whose retries were exhausted.
    Transport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub role: AgentRole,
    pub round: u32,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub fault: ScriptedFault,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub entry: Vec<ScriptEntry>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Config(format!("cannot read script {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| AgentError::Config(format!("script {}: {e}", path.display())))
    }

    pub fn push(&mut self, role: AgentRole, round: u32, response: impl Into<String>) -> &mut Self {
        self.entry.push(ScriptEntry {
            role,
            round,
            response: response.into(),
            fault: ScriptedFault::None,
        });
        self
    }
}

/// Replays canned responses keyed by (role, round). Several entries for the
/// same key are consumed in file order.
pub struct ScriptedBackend {
    queues: BTreeMap<(AgentRole, u32), VecDeque<ScriptEntry>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let mut queues: BTreeMap<_, VecDeque<_>> = BTreeMap::new();
        for e in script.entry {
            queues.entry((e.role, e.round)).or_default().push_back(e);
        }
        Self { queues }
    }

    pub fn remaining(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&mut self, role: AgentRole, round: u32, _messages: &[ChatMessage]) -> Result<ChatReply, AgentError> {
        let entry = self
            .queues
            .get_mut(&(role, round))
            .and_then(VecDeque::pop_front)
            .ok_or(AgentError::Scripting { role, round })?;
        match entry.fault {
            ScriptedFault::Transport => Err(AgentError::Transport {
                attempts: 1,
                message: "scripted transport failure".into(),
            }),
            ScriptedFault::None => Ok(ChatReply {
                text: entry.response,
                usage: None,
                latency_ms: None,
                attempts: 1,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Wait before retry k (1-based) is `backoff_s[k - 1]`; the last value
    /// repeats if the list is shorter than needed.
    pub backoff_s: Vec<f64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_s: vec![1.0, 4.0, 16.0],
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        let i = (retry as usize).saturating_sub(1);
        let s = self.backoff_s.get(i).or(self.backoff_s.last()).copied().unwrap_or(0.0);
        Duration::from_secs_f64(s.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer credential.
    pub api_key_env: String,
    pub temperature: Option<f64>,
    pub max_tokens: u32,
    /// Request field carrying `max_tokens` (some endpoints use
    /// `max_completion_tokens`).
    pub max_tokens_field: String,
    pub timeout_s: f64,
    pub retry: RetryPolicy,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "o4-mini".into(),
            api_key_env: "KERNELFORGE_API_KEY".into(),
            temperature: None,
            max_tokens: 16384,
            max_tokens_field: "max_completion_tokens".into(),
            timeout_s: 120.0,
            retry: RetryPolicy::default(),
        }
    }
}

/// Raw HTTP exchange: POST a JSON body, get (status, body text).
pub trait Transport: Send {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<(u16, String), String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| AgentError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<(u16, String), String> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

pub type Sleeper = Box<dyn FnMut(Duration) + Send>;

pub struct LlmBackend {
    cfg: LlmConfig,
    api_key: String,
    transport: Box<dyn Transport>,
    sleep: Sleeper,
}

impl std::fmt::Debug for LlmBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmBackend")
            .field("endpoint", &self.cfg.endpoint)
            .field("model", &self.cfg.model)
            .finish_non_exhaustive()
    }
}

impl LlmBackend {
    /// Reads the credential from the configured environment variable.
    /// Fails before any request when it is missing or empty.
    pub fn from_env(cfg: LlmConfig) -> Result<Self, AgentError> {
        let key = std::env::var(&cfg.api_key_env).unwrap_or_default();
        let transport = ReqwestTransport::new()?;
        Self::with_transport(cfg, key, Box::new(transport), Box::new(std::thread::sleep))
    }

    pub fn with_transport(
        cfg: LlmConfig,
        api_key: String,
        transport: Box<dyn Transport>,
        sleep: Sleeper,
    ) -> Result<Self, AgentError> {
        if api_key.trim().is_empty() {
            return Err(AgentError::Config(format!(
                "credential environment variable `{}` is not set",
                cfg.api_key_env
            )));
        }
        if cfg.endpoint.is_empty() || cfg.model.is_empty() {
            return Err(AgentError::Config("llm endpoint and model must be set".into()));
        }
        if cfg.retry.max_attempts == 0 || !(cfg.timeout_s.is_finite() && cfg.timeout_s > 0.0) {
            return Err(AgentError::Config(
                "retry.max_attempts and timeout_s must be positive".into(),
            ));
        }
        Ok(Self {
            cfg,
            api_key,
            transport,
            sleep,
        })
    }

    fn body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
        });
        body[self.cfg.max_tokens_field.as_str()] = json!(self.cfg.max_tokens);
        if let Some(t) = self.cfg.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

fn parse_completion(text: &str) -> Result<(String, Option<TokenUsage>), String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("response is not JSON: {e}"))?;
    let content = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or("response has no choices[0].message.content")?
        .to_string();
    let usage = v.get("usage").and_then(|u| {
        Some(TokenUsage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((content, usage))
}

impl ChatBackend for LlmBackend {
    fn chat(&mut self, role: AgentRole, round: u32, messages: &[ChatMessage]) -> Result<ChatReply, AgentError> {
        let body = self.body(messages);
        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.cfg.retry.max_attempts {
            if attempt > 1 {
                (self.sleep)(self.cfg.retry.delay_before_retry(attempt - 1));
            }
            match self
                .transport
                .post_json(&self.cfg.endpoint, &self.api_key, &body, timeout)
            {
                Ok((200..=299, text)) => {
                    let (content, usage) = parse_completion(&text).map_err(|message| AgentError::Transport {
                        attempts: attempt,
                        message,
                    })?;
                    return Ok(ChatReply {
                        text: content,
                        usage,
                        latency_ms: Some(started.elapsed().as_millis() as u64),
                        attempts: attempt,
                    });
                }
                Ok((status, text)) if status == 429 || status >= 500 => {
                    last = format!("HTTP {status}: {}", truncate(&text, 400));
                }
                Ok((status, text)) => {
                    return Err(AgentError::Transport {
                        attempts: attempt,
                        message: format!("HTTP {status}: {}", truncate(&text, 400)),
                    })
                }
                Err(e) => last = e,
            }
            warn!(target: "kernelforge::agents", "{role} round {round}: attempt {attempt} failed: {last}");
        }
        Err(AgentError::Transport {
            attempts: self.cfg.retry.max_attempts,
            message: last,
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    struct FakeTransport {
        replies: Mutex<VecDeque<Result<(u16, String), String>>>,
        calls: Arc<Mutex<Vec<serde_json::Value>>>,
    }

    impl Transport for FakeTransport {
        fn post_json(
            &self,
            _: &str,
            bearer: &str,
            body: &serde_json::Value,
            _: Duration,
        ) -> Result<(u16, String), String> {
            assert_eq!(bearer, "secret");
            self.calls.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().pop_front().expect("unexpected request")
        }
    }

    fn ok_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}],
               "usage": {"prompt_tokens": 12, "completion_tokens": 3}})
        .to_string()
    }

    type Shared<T> = Arc<Mutex<Vec<T>>>;

    fn backend(
        replies: Vec<Result<(u16, String), String>>,
    ) -> (LlmBackend, Shared<Duration>, Shared<serde_json::Value>) {
        let slept = Arc::new(Mutex::new(Vec::new()));
        let calls = Arc::new(Mutex::new(Vec::new()));
        let s2 = slept.clone();
        let t = FakeTransport {
            replies: Mutex::new(replies.into()),
            calls: calls.clone(),
        };
        let b = LlmBackend::with_transport(
            LlmConfig::default(),
            "secret".into(),
            Box::new(t),
            Box::new(move |d| s2.lock().unwrap().push(d)),
        )
        .unwrap();
        (b, slept, calls)
    }

    #[test]
    fn transient_failure_then_success() {
        let (mut b, slept, calls) = backend(vec![Err("connection reset".into()), Ok((200, ok_body("hi")))]);
        let r = b.chat(AgentRole::Planning, 1, &[ChatMessage::user("x")]).unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.attempts, 2);
        assert_eq!(r.usage.unwrap().prompt_tokens, 12);
        assert_eq!(*slept.lock().unwrap(), vec![Duration::from_secs(1)]);
        let body = &calls.lock().unwrap()[0];
        assert_eq!(body["model"], "o4-mini");
        assert_eq!(body["messages"][0]["content"], "x");
    }

    #[test]
    fn exhausted_retries_back_off() {
        let (mut b, slept, _) = backend(vec![
            Ok((503, "busy".into())),
            Ok((429, "slow".into())),
            Ok((500, "x".into())),
        ]);
        let err = b.chat(AgentRole::Coding, 2, &[]).unwrap_err();
        assert!(matches!(err, AgentError::Transport { attempts: 3, .. }));
        assert_eq!(
            *slept.lock().unwrap(),
            vec![Duration::from_secs(1), Duration::from_secs(4)]
        );
    }

    #[test]
    fn client_error_is_not_retried() {
        let (mut b, slept, _) = backend(vec![Ok((401, "bad key".into()))]);
        assert!(matches!(
            b.chat(AgentRole::Coding, 1, &[]),
            Err(AgentError::Transport { attempts: 1, .. })
        ));
        assert!(slept.lock().unwrap().is_empty());
    }

    #[test]
    fn missing_credential_fails_before_request() {
        struct Panicking;
        impl Transport for Panicking {
            fn post_json(&self, _: &str, _: &str, _: &serde_json::Value, _: Duration) -> Result<(u16, String), String> {
                panic!("no request expected")
            }
        }
        let err = LlmBackend::with_transport(
            LlmConfig::default(),
            String::new(),
            Box::new(Panicking),
            Box::new(|_| {}),
        )
        .unwrap_err();
        assert!(matches!(err, AgentError::Config(m) if m.contains("KERNELFORGE_API_KEY")));
    }

    #[test]
    fn scripted_replay_and_missing_entry() {
        let mut s = Script::default();
        s.push(AgentRole::Planning, 1, "first")
            .push(AgentRole::Planning, 1, "second");
        let mut b = ScriptedBackend::new(s);
        assert_eq!(b.chat(AgentRole::Planning, 1, &[]).unwrap().text, "first");
        assert_eq!(b.chat(AgentRole::Planning, 1, &[]).unwrap().text, "second");
        assert!(matches!(
            b.chat(AgentRole::Planning, 1, &[]),
            Err(AgentError::Scripting {
                role: AgentRole::Planning,
                round: 1
            })
        ));
        assert_eq!(b.remaining(), 0);
    }

    #[test]
    fn script_toml_format() {
        let s: Script = toml::from_str(
            r#"
            [[entry]]
            role = "coding"
            round = 2
            response = "```cuda\nx\n```"

            [[entry]]
            role = "planning"
            round = 3
            fault = "transport"
            "#,
        )
        .unwrap();
        assert_eq!(s.entry.len(), 2);
        let mut b = ScriptedBackend::new(s);
        assert!(matches!(
            b.chat(AgentRole::Planning, 3, &[]),
            Err(AgentError::Transport { .. })
        ));
    }
}
