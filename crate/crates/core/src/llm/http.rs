use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{whitespace_tokens, ChatBackend, ChatRequest, ChatResponse, LlmError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub auth_token: Option<String>,
    pub timeout_secs: f64,
    /// Extra attempts after the first one.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            auth_token: None,
            timeout_secs: 60.0,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if !(config.timeout_secs > 0.0 && config.timeout_secs.is_finite()) {
            return Err(LlmError::InvalidRequest(
                "timeout_secs must be positive".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, url: &str, body: &[u8], request: &ChatRequest) -> Attempt {
        let started = Instant::now();
        let mut call = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.config.auth_token {
            call = call.header("Authorization", format!("Bearer {token}"));
        }
        let resp = match call.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("status {status}"));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(LlmError::Status { status, body: text });
        }
        match parse_completion(&text, request) {
            Ok((content, usage)) => Attempt::Done(ChatResponse {
                content,
                usage,
                latency_ms,
            }),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

/// Extract `choices[0].message.content` and usage from a response body.
/// Missing usage is replaced by whitespace token counts.
fn parse_completion(text: &str, request: &ChatRequest) -> Result<(String, Usage), LlmError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or(LlmError::MissingChoices)?;
    let first = choices.first().ok_or(LlmError::MissingChoices)?;
    let content = first
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::MalformedResponse("choices[0].message.content missing".into()))?
        .to_string();
    let usage = match v.get("usage") {
        Some(u) => {
            let field = |k: &str| u.get(k).and_then(Value::as_u64);
            match (field("prompt_tokens"), field("completion_tokens")) {
                (Some(p), Some(c)) => Usage::new(p, c),
                _ => fallback_usage(request, &content),
            }
        }
        None => fallback_usage(request, &content),
    };
    Ok((content, usage))
}

fn fallback_usage(request: &ChatRequest, content: &str) -> Usage {
    Usage::new(
        whitespace_tokens(&request.joined_content()),
        whitespace_tokens(content),
    )
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let url = self.endpoint();
        let body = serde_json::to_vec(request).expect("request serializes");
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for n in 0..attempts {
            if n > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (n - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&url, &body, request) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(LlmError::Transport { attempts, last })
    }

    fn kind(&self) -> &'static str {
        "http"
    }
}
