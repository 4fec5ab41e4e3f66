//! Prompt construction and reply parsing. Everything here is a pure function
//! of its inputs so that prompt bytes are stable across runs and platforms.

use std::fmt::Write;

use serde_json::Value;

use super::{Action, EvidenceItem, EvidenceSet, Mode};
use crate::llm::ChatMessage;
use crate::radiomics::ToolRegistry;

/// Three decimals, ties to even on the exact binary value, no negative zero.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}

fn render_item(out: &mut String, registry: &ToolRegistry, item: &EvidenceItem) {
    let name = registry
        .tool(&item.pathology_id)
        .map_or(item.pathology_id.as_str(), |t| t.display_name.as_str());
    let _ = writeln!(out, "[Step {}] {} ({})", item.step, item.pathology_id, name);
    if !item.rationale.is_empty() {
        let _ = writeln!(out, "Rationale: {}", item.rationale);
    }
    if let Some(err) = &item.error {
        let _ = writeln!(out, "Tool error: {err}");
    }
    out.push_str("Features:\n");
    for (name, value, undefined) in item.features.iter() {
        if undefined {
            let _ = writeln!(out, "  {name} = n/a");
        } else {
            let _ = writeln!(out, "  {name} = {}", format_value(value));
        }
    }
    if item.neighbors.is_empty() {
        out.push_str("Reference findings: none\n");
    } else {
        out.push_str("Reference findings (nearest first):\n");
        for (i, n) in item.neighbors.neighbors.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {}. [distance {}] {}",
                i + 1,
                format_value(n.distance),
                n.snippet
            );
        }
    }
}

/// Deterministic text form of the accumulated evidence.
pub fn render_evidence(evidence: &EvidenceSet, registry: &ToolRegistry) -> String {
    if evidence.is_empty() {
        return "(no evidence collected)\n".to_string();
    }
    let mut out = String::new();
    for (i, item) in evidence.items().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        render_item(&mut out, registry, item);
    }
    out
}

fn decision_system(registry: &ToolRegistry) -> String {
    let mut s = String::from(
        "You are a radiology agent that examines a chest CT scan through pathology-specific tools. \
         Each tool measures quantitative features of one pathology and returns the reference findings \
         of the most similar scans. Choose the next tool to call, or STOP when the evidence is sufficient.\n\n\
         Tools:\n",
    );
    for t in &registry.tools {
        let _ = write!(s, "- {}: {}", t.pathology_id, t.display_name);
        if !t.description.is_empty() {
            let _ = write!(s, ". {}", t.description);
        }
        s.push('\n');
    }
    s.push_str(
        "\nOutput contract: reply with exactly one JSON object and nothing else, of the form \
         {\"action\": \"<tool id>\", \"rationale\": \"<one sentence>\"} or \
         {\"action\": \"STOP\", \"rationale\": \"<one sentence>\"}. \
         The action must be STOP or one of the unvisited tool ids listed by the user.",
    );
    s
}

fn seed_label(mode: Mode) -> &'static str {
    match mode {
        Mode::Template => "Template report",
        Mode::Refine => "Draft report",
    }
}

/// Messages for one decision call, before any correction turns.
pub fn decision_messages(
    evidence: &EvidenceSet,
    registry: &ToolRegistry,
    mode: Mode,
    unvisited: &[&str],
) -> Vec<ChatMessage> {
    let mut user = String::new();
    let _ = writeln!(user, "Query: {}\n", evidence.query);
    let _ = writeln!(user, "{}:\n{}\n", seed_label(mode), evidence.seed_text);
    user.push_str("Evidence so far:\n");
    user.push_str(&render_evidence(evidence, registry));
    let list = if unvisited.is_empty() {
        "(none)".to_string()
    } else {
        unvisited.join(", ")
    };
    let _ = write!(user, "\nUnvisited tools: {list}\n\nNext action:");
    vec![
        ChatMessage::system(decision_system(registry)),
        ChatMessage::user(user),
    ]
}

pub(crate) fn correction_message(failure: &ParseFailure, unvisited: &[&str]) -> ChatMessage {
    let list = if unvisited.is_empty() {
        "(none)".to_string()
    } else {
        unvisited.join(", ")
    };
    ChatMessage::user(format!(
        "Your reply was rejected: {failure}. Reply with exactly one JSON object \
         {{\"action\": ..., \"rationale\": ...}} where action is STOP or one of: {list}."
    ))
}

/// Messages for the final report call.
pub fn synthesis_messages(
    evidence: &EvidenceSet,
    registry: &ToolRegistry,
    mode: Mode,
) -> Vec<ChatMessage> {
    let system = match mode {
        Mode::Template => {
            "You are a radiologist writing the Findings section of a chest CT report. \
             Rewrite the template report into a Findings section using only the structured evidence provided. \
             State a finding only when the evidence supports it and do not add findings that are absent from it. \
             Output only the report text."
        }
        Mode::Refine => {
            "You are a radiologist reviewing a draft chest CT report. \
             Verify every finding of the draft against the structured evidence provided, \
             correct or remove statements the evidence contradicts, and add findings the evidence supports. \
             Output only the corrected Findings text."
        }
    };
    let mut user = String::new();
    let _ = writeln!(user, "Query: {}\n", evidence.query);
    let _ = writeln!(user, "{}:\n{}\n", seed_label(mode), evidence.seed_text);
    user.push_str("Evidence:\n");
    user.push_str(&render_evidence(evidence, registry));
    user.push_str("\nReport:");
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseFailure {
    NoJsonObject,
    MissingAction,
    UnknownTool(String),
    AlreadyVisited(String),
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseFailure::NoJsonObject => f.write_str("no JSON object found"),
            ParseFailure::MissingAction => f.write_str("the object has no string field \"action\""),
            ParseFailure::UnknownTool(t) => write!(f, "'{t}' is not a registered tool"),
            ParseFailure::AlreadyVisited(t) => write!(f, "'{t}' was already visited"),
        }
    }
}

/// The first well-formed JSON object embedded in `text`.
fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Parse a decision reply and check the action against the tool set.
pub fn parse_decision(
    text: &str,
    registry: &ToolRegistry,
    visited: impl Fn(&str) -> bool,
) -> Result<(Action, String), ParseFailure> {
    let obj = first_json_object(text).ok_or(ParseFailure::NoJsonObject)?;
    let action = obj
        .get("action")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .ok_or(ParseFailure::MissingAction)?;
    let rationale = obj
        .get("rationale")
        .and_then(Value::as_str)
        .unwrap_or("")
        .trim()
        .to_string();
    if action.eq_ignore_ascii_case("stop") {
        return Ok((Action::Stop, rationale));
    }
    if registry.tool(action).is_none() {
        return Err(ParseFailure::UnknownTool(action.to_string()));
    }
    if visited(action) {
        return Err(ParseFailure::AlreadyVisited(action.to_string()));
    }
    Ok((Action::Tool(action.to_string()), rationale))
}
