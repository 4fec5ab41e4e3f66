use std::io::BufRead;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{whitespace_tokens, ChatBackend, ChatRequest, ChatResponse, LlmError, Usage};

/// One scripted reply. `matcher` is `"*"` or a literal substring of the
/// request content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(rename = "match")]
    pub matcher: String,
    pub response: String,
}

impl Fixture {
    pub fn new(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: matcher.into(),
            response: response.into(),
        }
    }

    fn matches(&self, content: &str) -> bool {
        self.matcher == "*" || content.contains(&self.matcher)
    }
}

#[derive(Debug, Default)]
struct State {
    consumed: Vec<bool>,
    requests: Vec<ChatRequest>,
}

/// Replays fixtures in order: each call consumes the first unconsumed fixture
/// that matches. Calls are serialized, so concurrent callers observe a total
/// order. Usage is whitespace token counts and latency is always zero.
#[derive(Debug)]
pub struct ScriptedBackend {
    fixtures: Vec<Fixture>,
    state: Mutex<State>,
}

impl ScriptedBackend {
    pub fn new(fixtures: Vec<Fixture>) -> Self {
        let consumed = vec![false; fixtures.len()];
        Self {
            fixtures,
            state: Mutex::new(State {
                consumed,
                requests: Vec::new(),
            }),
        }
    }

    /// Parse a JSONL fixture file of `{"match": ..., "response": ...}`.
    pub fn from_jsonl<R: BufRead>(source: R) -> Result<Self, LlmError> {
        let mut fixtures = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Fixture = serde_json::from_str(&line).map_err(|e| LlmError::Fixture {
                line: i + 1,
                message: e.to_string(),
            })?;
            fixtures.push(f);
        }
        Ok(Self::new(fixtures))
    }

    /// Every request seen so far, in call order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state
            .lock()
            .unwrap()
            .consumed
            .iter()
            .filter(|c| !**c)
            .count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let content = request.joined_content();
        let mut state = self.state.lock().unwrap();
        state.requests.push(request.clone());
        let hit = self
            .fixtures
            .iter()
            .enumerate()
            .find(|(i, f)| !state.consumed[*i] && f.matches(&content))
            .map(|(i, _)| i)
            .ok_or(LlmError::FixtureExhausted)?;
        state.consumed[hit] = true;
        let response = self.fixtures[hit].response.clone();
        Ok(ChatResponse {
            usage: Usage::new(whitespace_tokens(&content), whitespace_tokens(&response)),
            content: response,
            latency_ms: 0.0,
        })
    }

    fn kind(&self) -> &'static str {
        "scripted"
    }
}
