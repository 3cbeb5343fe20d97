use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{ChatClient, ChatRequest, LlmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// Full chat-completions URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; `None` sends no token.
    pub api_key_env: Option<String>,
    pub timeout_s: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "generator".into(),
            api_key_env: Some("ANYECG_LLM_API_KEY".into()),
            timeout_s: 120,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

/// Client for OpenAI-compatible `chat/completions` endpoints.
pub struct HttpChatClient {
    cfg: ClientConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        let token = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::MissingCredential(var.clone()))?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { cfg, token, http })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": request.messages,
        });
        if let Some(t) = request.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(s) = request.seed {
            body["seed"] = json!(s);
        }
        if let Some(m) = request.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, LlmError)> {
        let mut req = self.http.post(&self.cfg.endpoint).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| (true, LlmError::Transport(e.to_string())))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, LlmError::Transport(e.to_string())))?;
        if !status.is_success() {
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err((
                retry,
                LlmError::Status {
                    status: status.as_u16(),
                    body: text,
                },
            ));
        }
        parse_completion(&text).map_err(|e| (false, e))
    }
}

/// Extracts `choices[0].message.content` from a completion response body.
pub fn parse_completion(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| LlmError::Decode(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::Decode("missing choices[0].message.content".into()))
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = self.body(request);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((false, e)) => return Err(e),
                Err((true, e)) => {
                    tracing::warn!(attempt = i + 1, error = %e, "chat completion failed");
                    last = e.to_string();
                    if i + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << i.min(6)));
                    }
                }
            }
        }
        Err(LlmError::Exhausted { attempts, last })
    }

    fn model_tag(&self) -> String {
        self.cfg.model.clone()
    }
}
