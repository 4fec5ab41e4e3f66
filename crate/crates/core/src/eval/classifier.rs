use std::collections::BTreeMap;
use std::time::Duration;

use serde::Deserialize;

use super::{derive_labels, EvalError, LabelSet, Lexicon};
use crate::pathology::PATHOLOGIES;

/// Maps report text to the 18 presence labels.
pub trait LabelClassifier: Send + Sync {
    fn classify(&self, report: &str) -> Result<LabelSet, EvalError>;

    fn kind(&self) -> &'static str;
}

/// The offline rule-based deriver.
#[derive(Debug, Clone)]
pub struct LexiconClassifier {
    pub lexicon: Lexicon,
}

impl LexiconClassifier {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }
}

impl LabelClassifier for LexiconClassifier {
    fn classify(&self, report: &str) -> Result<LabelSet, EvalError> {
        Ok(derive_labels(report, &self.lexicon))
    }

    fn kind(&self) -> &'static str {
        "lexicon"
    }
}

/// A served classifier: `POST {"text": ...}` answered by
/// `{"probabilities": {<pathology_id>: p, ...}}` covering all 18 ids.
pub struct RemoteClassifier {
    url: String,
    threshold: f64,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ProbabilityReply {
    probabilities: BTreeMap<String, f64>,
}

impl RemoteClassifier {
    pub fn new(
        url: impl Into<String>,
        timeout_secs: f64,
        threshold: f64,
    ) -> Result<Self, EvalError> {
        if !(timeout_secs > 0.0 && timeout_secs.is_finite()) {
            return Err(EvalError::InvalidArgument(
                "timeout_secs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(EvalError::InvalidArgument(format!(
                "threshold {threshold} outside [0, 1]"
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            url: url.into(),
            threshold,
            agent,
        })
    }

    pub fn probabilities(&self, report: &str) -> Result<BTreeMap<String, f64>, EvalError> {
        let body = serde_json::to_vec(&serde_json::json!({ "text": report }))?;
        let resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(&body[..])
            .map_err(|e| EvalError::Classifier(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| EvalError::Classifier(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(EvalError::Classifier(format!("status {status}: {text}")));
        }
        let reply: ProbabilityReply =
            serde_json::from_str(&text).map_err(|e| EvalError::Classifier(e.to_string()))?;
        Ok(reply.probabilities)
    }
}

impl LabelClassifier for RemoteClassifier {
    fn classify(&self, report: &str) -> Result<LabelSet, EvalError> {
        let probs = self.probabilities(report)?;
        let mut out = LabelSet::none();
        for (id, _) in PATHOLOGIES {
            let p = *probs
                .get(id)
                .ok_or_else(|| EvalError::Classifier(format!("no probability for '{id}'")))?;
            out.set(id, p >= self.threshold)?;
        }
        Ok(out)
    }

    fn kind(&self) -> &'static str {
        "remote"
    }
}
