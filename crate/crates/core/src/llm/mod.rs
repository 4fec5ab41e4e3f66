//! Chat-completion backends.
//!
//! [`HttpBackend`] speaks the chat-completions JSON protocol over HTTP(S).
//! [`ScriptedBackend`] replays fixture responses for offline, byte-stable
//! runs. Both report token usage and latency per call.

mod http;
mod scripted;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{Fixture, ScriptedBackend};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: String },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("response has no choices")]
    MissingChoices,
    #[error("no unconsumed fixture matches the request")]
    FixtureExhausted,
    #[error("fixture line {line}: {message}")]
    Fixture { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A validated request: non-empty messages, temperature exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    model: String,
    messages: Vec<ChatMessage>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Result<Self, LlmError> {
        Self::with_options(model, messages, 0.0, None)
    }

    pub fn with_options(
        model: impl Into<String>,
        messages: Vec<ChatMessage>,
        temperature: f64,
        max_tokens: Option<u32>,
    ) -> Result<Self, LlmError> {
        if temperature != 0.0 {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be 0.0, got {temperature}"
            )));
        }
        if messages.is_empty() {
            return Err(LlmError::InvalidRequest(
                "messages must be non-empty".into(),
            ));
        }
        if let Some(m) = messages
            .iter()
            .find(|m| m.role != Role::Assistant && m.content.is_empty())
        {
            return Err(LlmError::InvalidRequest(format!(
                "empty {:?} message",
                m.role
            )));
        }
        if max_tokens == Some(0) {
            return Err(LlmError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(Self {
            model: model.into(),
            messages,
            // normalizes -0.0
            temperature: 0.0,
            max_tokens,
        })
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn max_tokens(&self) -> Option<u32> {
        self.max_tokens
    }

    /// All message contents joined by newlines.
    pub fn joined_content(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
        }
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
        self.total_tokens += rhs.total_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Usage,
    pub latency_ms: f64,
}

/// Whitespace-delimited token count used for synthetic usage.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// A chat-completion backend. Implementations must be safe to share.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// Short name recorded in run manifests.
    fn kind(&self) -> &'static str;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn kind(&self) -> &'static str {
        (**self).kind()
    }
}
