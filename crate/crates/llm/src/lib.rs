//! Chat-completion clients used for multi-ECG QA generation and answer
//! judging. The [`ChatClient`] trait is the seam: production code talks to an
//! OpenAI-compatible HTTP endpoint, tests use [`ScriptedClient`].

mod http;
mod scripted;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use http::{ClientConfig, HttpChatClient};
pub use scripted::ScriptedClient;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("environment variable `{0}` with the API token is not set")]
    MissingCredential(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("scripted client has no reply left for request {0}")]
    ScriptExhausted(usize),
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
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
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn user(prompt: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::user(prompt)],
            temperature: None,
            seed: None,
            max_tokens: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// All message contents joined, for payload audits.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub trait ChatClient: Send + Sync {
    /// Returns the assistant text of one completion.
    fn complete(&self, request: &ChatRequest) -> Result<String>;

    /// Identifies the backing model in reports.
    fn model_tag(&self) -> String;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }

    fn model_tag(&self) -> String {
        (**self).model_tag()
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }

    fn model_tag(&self) -> String {
        (**self).model_tag()
    }
}

/// Wraps a client and keeps a copy of every request it forwards.
pub struct RecordingClient<C> {
    inner: C,
    log: Mutex<Vec<ChatRequest>>,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("request log poisoned").clone()
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.log.lock().expect("request log poisoned").push(request.clone());
        self.inner.complete(request)
    }

    fn model_tag(&self) -> String {
        self.inner.model_tag()
    }
}

/// Runs `requests` with at most `max_in_flight` concurrent calls. Results
/// keep the input order.
pub fn complete_all<C: ChatClient + ?Sized>(
    client: &C,
    requests: &[ChatRequest],
    max_in_flight: usize,
) -> Vec<Result<String>> {
    let workers = max_in_flight.clamp(1, requests.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<String>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let r = client.complete(req);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect()
}
