//! Chat-completion clients: a minimal HTTP wire contract, a scripted mock,
//! and a content-hash response cache.
//!
//! The HTTP client posts `{"model", "messages": [{"role": "user", ...}]}`
//! to a configured endpoint and reads `choices[0].message.content`, which
//! covers the common chat-completion servers. Endpoint and bearer token
//! come from environment variables so no credentials live in config files.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Anything that can answer a single-prompt completion request.
pub trait ChatClient {
    fn complete(&self, prompt: &str) -> Result<String>;
    /// Stable identifier used in cache keys.
    fn id(&self) -> String;
}

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

/// Environment variables read by [`HttpChatClient::from_env`].
pub const ENDPOINT_ENV: &str = "FACTSTEER_LLM_ENDPOINT";
pub const TOKEN_ENV: &str = "FACTSTEER_LLM_TOKEN";
pub const MODEL_ENV: &str = "FACTSTEER_LLM_MODEL";

pub struct HttpChatClient {
    endpoint: String,
    token: Option<String>,
    model: String,
    max_retries: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl HttpChatClient {
    pub fn new(endpoint: String, token: Option<String>, model: String) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self {
            endpoint,
            token,
            model,
            max_retries: 2,
            client,
        })
    }

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::Client(format!("{ENDPOINT_ENV} not set")))?;
        let token = std::env::var(TOKEN_ENV).ok();
        let model = std::env::var(MODEL_ENV).unwrap_or_else(|_| "default".into());
        Self::new(endpoint, token, model)
    }

    fn request_once(&self, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Error::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Client(format!("endpoint status {}", resp.status())));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| Error::Client("response carried no choices".into()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut delay = Duration::from_millis(250);
        let mut last_err = None;
        for attempt in 0..=self.max_retries {
            match self.request_once(prompt) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    last_err = Some(e);
                    if attempt < self.max_retries {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last_err.unwrap())
    }

    fn id(&self) -> String {
        format!("http:{}:{}", self.endpoint, self.model)
    }
}

// ---------------------------------------------------------------------------
// Scripted mock
// ---------------------------------------------------------------------------

/// One substring-match rule for the mock client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Reply applies when the prompt contains this substring.
    pub contains: String,
    pub reply: String,
}

/// Fixture format for a scripted mock client.
///
/// Two modes:
/// - `rules`: first matching substring rule wins, else `default`.
/// - `sequence`: replies are consumed in call order, cycling at the end.
///   Sequence mocks are order-sensitive, so drive them single-threaded.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub sequence: Vec<String>,
    #[serde(default)]
    pub default: Option<String>,
}

pub struct MockClient {
    script: MockScript,
    cursor: RefCell<usize>,
    name: String,
}

impl MockClient {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            cursor: RefCell::new(0),
            name: "mock".into(),
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let script: MockScript = crate::corpus::read_json(path)?;
        Ok(Self::new(script))
    }

    /// Mock that always replies with the same text.
    pub fn constant(reply: &str) -> Self {
        Self::new(MockScript {
            default: Some(reply.to_string()),
            ..MockScript::default()
        })
    }

    /// Mock that replays `replies` in call order, cycling.
    pub fn sequence<S: Into<String>>(replies: Vec<S>) -> Self {
        Self::new(MockScript {
            sequence: replies.into_iter().map(Into::into).collect(),
            ..MockScript::default()
        })
    }

    pub fn with_rules(rules: Vec<MockRule>, default: Option<String>) -> Self {
        Self::new(MockScript {
            rules,
            default,
            ..MockScript::default()
        })
    }
}

impl ChatClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        for rule in &self.script.rules {
            if prompt.contains(&rule.contains) {
                return Ok(rule.reply.clone());
            }
        }
        if !self.script.sequence.is_empty() {
            let mut cursor = self.cursor.borrow_mut();
            let reply = self.script.sequence[*cursor % self.script.sequence.len()].clone();
            *cursor += 1;
            return Ok(reply);
        }
        self.script
            .default
            .clone()
            .ok_or_else(|| Error::Client("mock has no matching rule and no default".into()))
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

// ---------------------------------------------------------------------------
// Content-hash cache
// ---------------------------------------------------------------------------

/// Wraps a client with an in-memory plus optional on-disk cache keyed by
/// sha256(client id, prompt). External calls become idempotent; rerunning a
/// pipeline replays cached replies byte-for-byte.
pub struct CachedClient<C: ChatClient> {
    inner: C,
    dir: Option<PathBuf>,
    memory: RefCell<HashMap<String, String>>,
}

impl<C: ChatClient> CachedClient<C> {
    pub fn new(inner: C, dir: Option<PathBuf>) -> Self {
        Self {
            inner,
            dir,
            memory: RefCell::new(HashMap::new()),
        }
    }

    fn key(&self, prompt: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.inner.id().as_bytes());
        hasher.update([0u8]);
        hasher.update(prompt.as_bytes());
        hex::encode(hasher.finalize())
    }
}

impl<C: ChatClient> ChatClient for CachedClient<C> {
    fn complete(&self, prompt: &str) -> Result<String> {
        let key = self.key(prompt);
        if let Some(hit) = self.memory.borrow().get(&key) {
            return Ok(hit.clone());
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(&key);
            if let Ok(text) = std::fs::read_to_string(&path) {
                self.memory.borrow_mut().insert(key, text.clone());
                return Ok(text);
            }
        }
        let reply = self.inner.complete(prompt)?;
        if let Some(dir) = &self.dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(&key), &reply)?;
        }
        self.memory.borrow_mut().insert(key, reply.clone());
        Ok(reply)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}
