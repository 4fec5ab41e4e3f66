//! Report-quality measurement: label derivation, classification P/R/F1,
//! n-gram overlap metrics, laterality F1, cohort aggregation, k-sweeps and
//! the oversegmentation sensitivity analysis.

mod classifier;
mod cohort;
mod labels;
mod laterality;
mod text;

pub use classifier::{LabelClassifier, LexiconClassifier, RemoteClassifier};
pub use cohort::{
    evaluate_cohort, k_sweep, oversegmentation_flag, sensitivity_report, CaseInput, CaseResult,
    CohortResult, KSweep, KSweepRow, MetricsBundle, SensitivityReport, DEFAULT_KS,
};
pub use labels::{
    derive_labels, split_sentences, GoldLabels, LabelSet, Lexicon, DEFAULT_LEXICON_JSON,
};
pub use laterality::{laterality_eval, predict_laterality};
pub use text::{bleu1, meteor_exact, prf1, rouge_l, tokenize, ClassificationMetrics, Prf1};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error("invalid label set: {0}")]
    Labels(String),
    #[error("length mismatch: {left} predictions vs {right} gold")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("classifier failed: {0}")]
    Classifier(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
