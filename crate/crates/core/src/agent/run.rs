use serde::Serialize;

use super::prompt::correction_message;
use super::{
    decision_messages, init_evidence, parse_decision, synthesis_messages, Action, ActionDecision,
    AgentError, EvidenceItem, EvidenceSet, RunConfig,
};
use crate::exec::Execution;
use crate::llm::{ChatBackend, ChatMessage, ChatRequest, ChatResponse, LlmError};
use crate::radiomics::{estimate_midplanes, run_tool, FeatureVector, Midplanes, ToolRegistry};
use crate::retrieval::{Index, RetrievalResult};
use crate::volume::StudyBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    StopAction,
    AllToolsVisited,
    MaxSteps,
    /// The step budget ran out after at least one decision fell back to the
    /// registry-order schedule.
    FallbackSchedule,
}

/// One backend call as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub raw: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
}

impl From<ChatResponse> for CallRecord {
    fn from(r: ChatResponse) -> Self {
        Self {
            raw: r.content,
            prompt_tokens: r.usage.prompt_tokens,
            completion_tokens: r.usage.completion_tokens,
            latency_ms: r.latency_ms,
        }
    }
}

/// Outcome of `decide`: the action plus every call it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub decision: ActionDecision,
    pub calls: Vec<CallRecord>,
    pub parse_errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub decision: ActionDecision,
    pub calls: Vec<CallRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub parse_errors: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureVector>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbors: Option<RetrievalResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Totals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    /// Summed backend latency.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub study_id: String,
    pub mode: super::Mode,
    pub k: usize,
    pub steps: Vec<StepRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<CallRecord>,
    pub totals: Totals,
    pub report: String,
    pub termination: Option<Termination>,
    pub fallback_used: bool,
    pub aborted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunTrace {
    fn new(study_id: &str, config: &RunConfig) -> Self {
        Self {
            study_id: study_id.to_string(),
            mode: config.mode,
            k: config.k,
            steps: Vec::new(),
            synthesis: None,
            totals: Totals::default(),
            report: String::new(),
            termination: None,
            fallback_used: false,
            aborted: false,
            error: None,
        }
    }

    /// Recompute totals from the per-step and synthesis records.
    pub fn recompute_totals(&mut self) {
        let mut t = Totals::default();
        for (p, c, l) in self
            .steps
            .iter()
            .map(|s| (s.prompt_tokens, s.completion_tokens, s.latency_ms))
            .chain(
                self.synthesis
                    .iter()
                    .map(|s| (s.prompt_tokens, s.completion_tokens, s.latency_ms)),
            )
        {
            t.prompt_tokens += p;
            t.completion_tokens += c;
            t.wall_ms += l;
        }
        t.total_tokens = t.prompt_tokens + t.completion_tokens;
        self.totals = t;
    }

    pub fn llm_calls(&self) -> usize {
        self.steps.iter().map(|s| s.calls.len()).sum::<usize>()
            + usize::from(self.synthesis.is_some())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: String,
    pub trace: RunTrace,
    pub evidence: EvidenceSet,
}

/// Immutable run context: shared registry, index and backend.
pub struct Agent<'a> {
    pub registry: &'a ToolRegistry,
    pub index: &'a Index,
    pub backend: &'a dyn ChatBackend,
    pub config: &'a RunConfig,
    pub execution: Execution,
}

impl<'a> Agent<'a> {
    pub fn new(
        registry: &'a ToolRegistry,
        index: &'a Index,
        backend: &'a dyn ChatBackend,
        config: &'a RunConfig,
    ) -> Self {
        Self {
            registry,
            index,
            backend,
            config,
            execution: Execution::default(),
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    fn request(&self, messages: Vec<ChatMessage>) -> Result<ChatRequest, LlmError> {
        ChatRequest::with_options(
            &self.config.model,
            messages,
            self.config.temperature,
            self.config.max_tokens,
        )
    }

    fn unvisited<'e>(&'e self, evidence: &EvidenceSet) -> Vec<&'e str> {
        self.registry
            .tools
            .iter()
            .map(|t| t.pathology_id.as_str())
            .filter(|p| !evidence.visited(p))
            .collect()
    }

    /// Ask the backend for the next action. Invalid replies are re-asked up
    /// to `parse_retries` times, then the next unvisited tool in registry
    /// order is taken.
    pub fn decide(&self, evidence: &EvidenceSet) -> Result<Decision, LlmError> {
        let unvisited = self.unvisited(evidence);
        let mut messages = decision_messages(evidence, self.registry, self.config.mode, &unvisited);
        let mut calls = Vec::new();
        let mut parse_errors = Vec::new();
        for attempt in 0..=self.config.parse_retries {
            let resp = self.backend.complete(&self.request(messages.clone())?)?;
            let parsed = parse_decision(&resp.content, self.registry, |p| evidence.visited(p));
            let reply = resp.content.clone();
            calls.push(CallRecord::from(resp));
            match parsed {
                Ok((action, rationale)) => {
                    return Ok(Decision {
                        decision: ActionDecision {
                            action,
                            rationale,
                            fallback: false,
                        },
                        calls,
                        parse_errors,
                    });
                }
                Err(failure) => {
                    if attempt < self.config.parse_retries {
                        messages.push(ChatMessage::assistant(reply));
                        messages.push(correction_message(&failure, &unvisited));
                    }
                    parse_errors.push(failure.to_string());
                }
            }
        }
        let action = unvisited
            .first()
            .map_or(Action::Stop, |p| Action::Tool(p.to_string()));
        Ok(Decision {
            decision: ActionDecision {
                action,
                rationale: "fallback: next unvisited tool in registry order".into(),
                fallback: true,
            },
            calls,
            parse_errors,
        })
    }

    /// Run one tool and retrieve its neighbors. Index errors produce an
    /// error-bearing item with flagged features and no neighbors.
    pub fn step(
        &self,
        evidence: &EvidenceSet,
        study: &StudyBundle,
        pathology_id: &str,
        rationale: &str,
        planes: Midplanes,
    ) -> Result<EvidenceItem, AgentError> {
        let tool = self.registry.tool(pathology_id).ok_or_else(|| {
            AgentError::Evidence(format!("'{pathology_id}' is not a registered tool"))
        })?;
        let features = run_tool(study, tool, &self.registry.schema_id, planes);
        let (features, neighbors, error) =
            match self
                .index
                .knn_query_with(pathology_id, &features, self.config.k, self.execution)
            {
                Ok(n) => (features, n, None),
                Err(e) => (
                    FeatureVector::all_undefined(&self.registry.schema_id, tool),
                    RetrievalResult::default(),
                    Some(e.to_string()),
                ),
            };
        Ok(EvidenceItem {
            step: evidence.next_step(),
            pathology_id: pathology_id.to_string(),
            features,
            neighbors,
            rationale: rationale.to_string(),
            error,
        })
    }

    /// `r = g(q, E_T)`: one call, reply trimmed.
    pub fn synthesize(&self, evidence: &EvidenceSet) -> Result<(String, CallRecord), LlmError> {
        let messages = synthesis_messages(evidence, self.registry, self.config.mode);
        let resp = self.backend.complete(&self.request(messages)?)?;
        let report = resp.content.trim().to_string();
        Ok((report, resp.into()))
    }

    /// Decide and step until STOP, every tool is visited or the step budget
    /// is spent, then synthesize.
    pub fn run(
        &self,
        study: &StudyBundle,
        query: &str,
        draft: Option<&str>,
    ) -> Result<RunOutcome, AgentError> {
        self.config.validate()?;
        let mut evidence =
            init_evidence(self.config.mode, query, draft, &self.config.template_text)?;
        let planes = estimate_midplanes(study);
        let max_steps = self.config.effective_max_steps(self.registry.tools.len());
        let mut trace = RunTrace::new(&study.study_id, self.config);

        let abort = |mut trace: RunTrace, e: LlmError| {
            trace.aborted = true;
            trace.error = Some(e.to_string());
            trace.recompute_totals();
            AgentError::Aborted {
                trace: Box::new(trace),
                source: e,
            }
        };

        let termination = loop {
            if self.unvisited(&evidence).is_empty() {
                break Termination::AllToolsVisited;
            }
            if evidence.len() >= max_steps {
                break if trace.fallback_used {
                    Termination::FallbackSchedule
                } else {
                    Termination::MaxSteps
                };
            }
            let d = match self.decide(&evidence) {
                Ok(d) => d,
                Err(e) => return Err(abort(trace, e)),
            };
            trace.fallback_used |= d.decision.fallback;
            let mut record = StepRecord {
                step: trace.steps.len() + 1,
                prompt_tokens: d.calls.iter().map(|c| c.prompt_tokens).sum(),
                completion_tokens: d.calls.iter().map(|c| c.completion_tokens).sum(),
                latency_ms: d.calls.iter().map(|c| c.latency_ms).sum(),
                decision: d.decision,
                calls: d.calls,
                parse_errors: d.parse_errors,
                features: None,
                neighbors: None,
                error: None,
            };
            match record.decision.action.clone() {
                Action::Stop => {
                    trace.steps.push(record);
                    break Termination::StopAction;
                }
                Action::Tool(p) => {
                    let item =
                        self.step(&evidence, study, &p, &record.decision.rationale, planes)?;
                    record.features = Some(item.features.clone());
                    record.neighbors = Some(item.neighbors.clone());
                    record.error = item.error.clone();
                    evidence.push(item)?;
                    trace.steps.push(record);
                }
            }
        };

        let (report, call) = match self.synthesize(&evidence) {
            Ok(r) => r,
            Err(e) => {
                trace.termination = Some(termination);
                return Err(abort(trace, e));
            }
        };
        trace.synthesis = Some(call);
        trace.report = report.clone();
        trace.termination = Some(termination);
        trace.recompute_totals();
        Ok(RunOutcome {
            report,
            trace,
            evidence,
        })
    }
}
