//! Sequential evidence-acquisition agent.
//!
//! The state is the query plus an [`EvidenceSet`]. Each step the backend
//! picks an unvisited pathology tool or `STOP`; a tool step extracts the
//! tool's features, retrieves the `k` nearest reference snippets from that
//! pathology's partition and appends both as one [`EvidenceItem`]. The final
//! report is a single synthesis call over the accumulated evidence.

mod prompt;
mod run;

pub use prompt::{
    decision_messages, format_value, parse_decision, render_evidence, synthesis_messages,
    ParseFailure,
};
pub use run::{Agent, CallRecord, Decision, RunOutcome, RunTrace, StepRecord, Termination, Totals};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;
use crate::radiomics::FeatureVector;
use crate::retrieval::RetrievalResult;

/// Neutral seed report used in template mode.
pub const DEFAULT_TEMPLATE_TEXT: &str = "The chest CT examination is reported below. Lungs, pleura, mediastinum, heart, and vessels were evaluated. Findings: to be determined per structured evidence.";

pub const DEFAULT_QUERY: &str = "Generate the Findings section of the chest CT report.";

pub const DEFAULT_MODEL: &str = "llama-3.1-8b-instruct";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("refine mode requires a draft report (--draft)")]
    MissingDraft,
    #[error("invalid run config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("evidence invariant violated: {0}")]
    Evidence(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("run aborted after {} step(s): {source}", trace.steps.len())]
    Aborted {
        trace: Box<RunTrace>,
        #[source]
        source: LlmError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Template,
    Refine,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Template => "template",
            Mode::Refine => "refine",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "template" => Ok(Mode::Template),
            "refine" => Ok(Mode::Refine),
            other => Err(format!(
                "unknown mode '{other}' (expected template or refine)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub k: usize,
    /// `None` means one step per registered tool.
    pub max_steps: Option<usize>,
    pub parse_retries: usize,
    pub model: String,
    pub template_text: String,
    pub max_tokens: Option<u32>,
    /// Must be 0.0; present so configs can state it explicitly.
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Template,
            k: 3,
            max_steps: None,
            parse_retries: 2,
            model: DEFAULT_MODEL.into(),
            template_text: DEFAULT_TEMPLATE_TEXT.into(),
            max_tokens: None,
            temperature: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.k == 0 {
            return Err(AgentError::InvalidConfig {
                field: "k",
                reason: "must be at least 1".into(),
            });
        }
        if self.max_steps == Some(0) {
            return Err(AgentError::InvalidConfig {
                field: "max_steps",
                reason: "must be at least 1".into(),
            });
        }
        if self.model.trim().is_empty() {
            return Err(AgentError::InvalidConfig {
                field: "model",
                reason: "must be non-empty".into(),
            });
        }
        if self.template_text.trim().is_empty() {
            return Err(AgentError::InvalidConfig {
                field: "template_text",
                reason: "must be non-empty".into(),
            });
        }
        if self.temperature != 0.0 {
            return Err(AgentError::InvalidConfig {
                field: "temperature",
                reason: format!("must be 0.0, got {}", self.temperature),
            });
        }
        if self.max_tokens == Some(0) {
            return Err(AgentError::InvalidConfig {
                field: "max_tokens",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn effective_max_steps(&self, tool_count: usize) -> usize {
        self.max_steps.unwrap_or(tool_count).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Action {
    Tool(String),
    Stop,
}

impl Action {
    pub fn as_str(&self) -> &str {
        match self {
            Action::Tool(id) => id,
            Action::Stop => "STOP",
        }
    }
}

impl From<Action> for String {
    fn from(a: Action) -> String {
        a.as_str().to_string()
    }
}

impl TryFrom<String> for Action {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s.is_empty() {
            return Err("empty action".into());
        }
        Ok(if s == "STOP" {
            Action::Stop
        } else {
            Action::Tool(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDecision {
    pub action: Action,
    pub rationale: String,
    /// True when the action came from the deterministic schedule rather than
    /// the backend.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceItem {
    pub step: usize,
    pub pathology_id: String,
    pub features: FeatureVector,
    pub neighbors: RetrievalResult,
    pub rationale: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `E_t`: query, seed report and the evidence gathered so far. Items are
/// append-only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceSet {
    pub query: String,
    pub seed_text: String,
    items: Vec<EvidenceItem>,
}

impl EvidenceSet {
    pub fn items(&self) -> &[EvidenceItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn visited(&self, pathology_id: &str) -> bool {
        self.items.iter().any(|i| i.pathology_id == pathology_id)
    }

    pub fn next_step(&self) -> usize {
        self.items.last().map_or(1, |i| i.step + 1)
    }

    pub fn push(&mut self, item: EvidenceItem) -> Result<(), AgentError> {
        if item.step != self.next_step() {
            return Err(AgentError::Evidence(format!(
                "step {} does not follow {}",
                item.step,
                self.next_step() - 1
            )));
        }
        if self.visited(&item.pathology_id) {
            return Err(AgentError::Evidence(format!(
                "{} already visited",
                item.pathology_id
            )));
        }
        self.items.push(item);
        Ok(())
    }
}

/// `E_0`. Template mode seeds with `template_text`; refine mode seeds with
/// the draft verbatim.
pub fn init_evidence(
    mode: Mode,
    query: &str,
    draft: Option<&str>,
    template_text: &str,
) -> Result<EvidenceSet, AgentError> {
    let seed_text = match mode {
        Mode::Template => template_text.to_string(),
        Mode::Refine => draft.ok_or(AgentError::MissingDraft)?.to_string(),
    };
    Ok(EvidenceSet {
        query: query.to_string(),
        seed_text,
        items: Vec::new(),
    })
}
