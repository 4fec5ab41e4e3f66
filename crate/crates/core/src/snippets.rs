//! Textual side of the reference space: four-shot extraction prompts, the
//! canonical negative sentence and Template-F1 verification.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Prf1;
use crate::llm::{ChatBackend, ChatMessage, ChatRequest};

/// Worked sample prompt set for arterial wall calcification.
pub const SAMPLE_PROMPT_SET_JSON: &str =
    include_str!("../data/prompt_sets/arterial_wall_calcification.json");

pub const EXAMPLE_COUNT: usize = 4;
const PLACEHOLDER: &str = "{pathology}";

#[derive(Debug, Error)]
pub enum SnippetError {
    #[error("invalid prompt set JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("prompt set must have exactly {EXAMPLE_COUNT} examples, found {0}")]
    ExampleCount(usize),
    #[error("instruction template lacks the {{pathology}} placeholder")]
    MissingPlaceholder,
    #[error("prompt set field '{0}' is empty")]
    EmptyField(&'static str),
    #[error("example {index} has an empty {field}")]
    EmptyExample { index: usize, field: &'static str },
    #[error("snippet source '{0}' has no label")]
    Unlabeled(String),
}

/// `No sign of <name> was found in the scan.`
pub fn canonical_negative(display_name: &str) -> String {
    debug_assert!(!display_name.is_empty(), "pathology name must be non-empty");
    format!("No sign of {display_name} was found in the scan.")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionExample {
    pub report: String,
    pub extraction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPromptSet {
    pub pathology_id: String,
    pub display_name: String,
    pub instruction_template: String,
    pub examples: Vec<ExtractionExample>,
}

impl ExtractionPromptSet {
    pub fn from_json(json: &str) -> Result<Self, SnippetError> {
        let set: Self = serde_json::from_str(json)?;
        set.validate()?;
        Ok(set)
    }

    pub fn sample() -> Self {
        Self::from_json(SAMPLE_PROMPT_SET_JSON).expect("bundled prompt set is valid")
    }

    pub fn validate(&self) -> Result<(), SnippetError> {
        if self.pathology_id.is_empty() {
            return Err(SnippetError::EmptyField("pathology_id"));
        }
        if self.display_name.is_empty() {
            return Err(SnippetError::EmptyField("display_name"));
        }
        if !self.instruction_template.contains(PLACEHOLDER) {
            return Err(SnippetError::MissingPlaceholder);
        }
        if self.examples.len() != EXAMPLE_COUNT {
            return Err(SnippetError::ExampleCount(self.examples.len()));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.report.trim().is_empty() {
                return Err(SnippetError::EmptyExample {
                    index: i + 1,
                    field: "report",
                });
            }
            if ex.extraction.trim().is_empty() {
                return Err(SnippetError::EmptyExample {
                    index: i + 1,
                    field: "extraction",
                });
            }
        }
        Ok(())
    }

    pub fn canonical_negative(&self) -> String {
        canonical_negative(&self.display_name)
    }
}

fn render_example(n: usize, ex: &ExtractionExample) -> String {
    let quote = |s: &str| serde_json::to_string(s).expect("string serializes");
    format!(
        "Example {n}: {{\n \"report\": {},\n \"extraction\": {}\n}}",
        quote(&ex.report),
        quote(&ex.extraction)
    )
}

/// System instruction plus the `[EXAMPLES]`/`[TASK]` user message.
pub fn build_extraction_prompt(set: &ExtractionPromptSet, report: &str) -> Vec<ChatMessage> {
    let system = set
        .instruction_template
        .replace(PLACEHOLDER, &set.display_name);
    let examples = set
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| render_example(i + 1, ex))
        .collect::<Vec<_>>()
        .join("\n\n");
    let user = format!(
        "[EXAMPLES]\n{examples}\n\n[TASK]\nExtract information from the following chest CT report.\nReport:\n{report}\n\nExtraction:"
    );
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedSnippet {
    pub source_id: String,
    #[serde(rename = "pathology")]
    pub pathology_id: String,
    pub text: String,
    #[serde(rename = "canonical_negative")]
    pub is_canonical_negative: bool,
}

impl ExtractedSnippet {
    /// Trims `reply` and flags it by byte equality with the canonical negative.
    pub fn new(source_id: &str, set: &ExtractionPromptSet, reply: &str) -> Self {
        let text = reply.trim().to_string();
        Self {
            source_id: source_id.to_string(),
            pathology_id: set.pathology_id.clone(),
            is_canonical_negative: text == set.canonical_negative(),
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractionFailure {
    pub source_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractionOutcome {
    /// Successful snippets in source order.
    pub snippets: Vec<ExtractedSnippet>,
    pub failures: Vec<ExtractionFailure>,
}

/// One call per report with at most `jobs` calls in flight. Output order
/// follows input order regardless of `jobs`.
pub fn extract_snippets(
    reports: &[(String, String)],
    set: &ExtractionPromptSet,
    backend: &dyn ChatBackend,
    model: &str,
    jobs: usize,
) -> ExtractionOutcome {
    let one = |source_id: &str, report: &str| -> Result<ExtractedSnippet, String> {
        let request = ChatRequest::new(model, build_extraction_prompt(set, report))
            .map_err(|e| e.to_string())?;
        let reply = backend.complete(&request).map_err(|e| e.to_string())?;
        if reply.content.trim().is_empty() {
            return Err("empty reply".into());
        }
        Ok(ExtractedSnippet::new(source_id, set, &reply.content))
    };

    let jobs = jobs.clamp(1, reports.len().max(1));
    let results: Vec<Result<ExtractedSnippet, String>> = if jobs == 1 {
        reports.iter().map(|(id, text)| one(id, text)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ExtractedSnippet, String>>>> =
            Mutex::new(vec![None; reports.len()]);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((id, text)) = reports.get(i) else {
                        break;
                    };
                    let r = one(id, text);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    };

    let mut out = ExtractionOutcome::default();
    for ((source_id, _), r) in reports.iter().zip(results) {
        match r {
            Ok(s) => out.snippets.push(s),
            Err(error) => out.failures.push(ExtractionFailure {
                source_id: source_id.clone(),
                error,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    #[serde(flatten)]
    pub scores: Prf1,
    /// Neither predictions nor labels contain a positive, so F1 = 0 is a
    /// convention rather than a measurement.
    pub no_positives: bool,
}

/// Template-F1 per pathology: a snippet predicts "present" unless it is the
/// canonical negative.
pub fn template_f1_verify(
    snippets: &[ExtractedSnippet],
    labels: &BTreeMap<String, bool>,
) -> Result<BTreeMap<String, Verification>, SnippetError> {
    let mut counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for s in snippets {
        let gold = *labels
            .get(&s.source_id)
            .ok_or_else(|| SnippetError::Unlabeled(s.source_id.clone()))?;
        let pred = !s.is_canonical_negative;
        let c = counts.entry(s.pathology_id.clone()).or_default();
        match (pred, gold) {
            (true, true) => c[0] += 1,
            (true, false) => c[1] += 1,
            (false, true) => c[2] += 1,
            (false, false) => c[3] += 1,
        }
    }
    Ok(counts
        .into_iter()
        .map(|(p, [tp, fp, fn_, tn])| {
            let v = Verification {
                tp,
                fp,
                fn_,
                tn,
                scores: Prf1::from_counts(tp, fp, fn_),
                no_positives: tp + fp + fn_ == 0,
            };
            (p, v)
        })
        .collect())
}
