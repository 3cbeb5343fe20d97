use std::collections::VecDeque;
use std::sync::Mutex;

use crate::{ChatClient, ChatRequest, LlmError, Result};

type Responder = Box<dyn Fn(&ChatRequest) -> Result<String> + Send + Sync>;

enum Script {
    Queue(Mutex<VecDeque<Result<String>>>),
    Fn(Responder),
}

/// Offline client that answers from a fixed queue or a closure and records
/// every request it sees.
pub struct ScriptedClient {
    script: Script,
    seen: Mutex<Vec<ChatRequest>>,
    tag: String,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::from_results(replies.into_iter().map(|r| Ok(r.into())))
    }

    pub fn from_results(replies: impl IntoIterator<Item = Result<String>>) -> Self {
        Self {
            script: Script::Queue(Mutex::new(replies.into_iter().collect())),
            seen: Mutex::new(Vec::new()),
            tag: "scripted".into(),
        }
    }

    pub fn from_fn(f: impl Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            script: Script::Fn(Box::new(f)),
            seen: Mutex::new(Vec::new()),
            tag: "scripted".into(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("request log poisoned").clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let n = {
            let mut seen = self.seen.lock().expect("request log poisoned");
            seen.push(request.clone());
            seen.len()
        };
        match &self.script {
            Script::Queue(q) => q
                .lock()
                .expect("script poisoned")
                .pop_front()
                .unwrap_or(Err(LlmError::ScriptExhausted(n))),
            Script::Fn(f) => f(request),
        }
    }

    fn model_tag(&self) -> String {
        self.tag.clone()
    }
}
