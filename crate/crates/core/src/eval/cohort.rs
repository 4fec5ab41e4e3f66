use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Serialize, Serializer};

use super::text::ClassificationMetrics;
use super::{
    bleu1, meteor_exact, predict_laterality, prf1, rouge_l, EvalError, GoldLabels, LabelClassifier,
    LabelSet, Lexicon, Prf1,
};
use crate::exec::Execution;
use crate::pathology::PATHOLOGIES;
use crate::volume::Laterality;

pub const DEFAULT_KS: [usize; 7] = [1, 3, 5, 7, 9, 11, 13];

#[derive(Debug, Clone, PartialEq)]
pub struct CaseInput {
    pub study_id: String,
    pub generated: String,
    pub reference: String,
    pub gold: GoldLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub study_id: String,
    pub predicted: LabelSet,
    pub gold: LabelSet,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub laterality_pred: Option<Laterality>,
    pub laterality_gold: Option<Laterality>,
}

fn ordered_map<S: Serializer>(v: &[(String, Prf1)], s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(v.iter().map(|(k, p)| (k, p)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsBundle {
    pub n_cases: usize,
    #[serde(serialize_with = "ordered_map")]
    pub per_pathology: Vec<(String, Prf1)>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    /// Over the cases that carry a gold laterality.
    pub laterality_f1: Option<f64>,
}

impl MetricsBundle {
    pub fn from_cases(rows: &[CaseResult]) -> Result<Self, EvalError> {
        if rows.is_empty() {
            return Err(EvalError::Empty("cohort"));
        }
        let pred: Vec<LabelSet> = rows.iter().map(|r| r.predicted).collect();
        let gold: Vec<LabelSet> = rows.iter().map(|r| r.gold).collect();
        let cls = prf1(&pred, &gold)?;
        let n = rows.len() as f64;
        let mean = |f: fn(&CaseResult) -> f64| rows.iter().map(f).sum::<f64>() / n;

        let lat: Vec<&CaseResult> = rows
            .iter()
            .filter(|r| r.laterality_gold.is_some())
            .collect();
        let laterality_f1 = (!lat.is_empty()).then(|| {
            let correct = lat
                .iter()
                .filter(|r| r.laterality_pred == r.laterality_gold)
                .count();
            let wrong = lat.len() - correct;
            Prf1::from_counts(correct, wrong, wrong).f1
        });
        Ok(Self {
            n_cases: rows.len(),
            macro_precision: cls.macro_precision,
            macro_recall: cls.macro_recall,
            macro_f1: cls.macro_f1,
            per_pathology: cls.per_pathology,
            bleu1: mean(|r| r.bleu1),
            rouge_l: mean(|r| r.rouge_l),
            meteor: mean(|r| r.meteor),
            laterality_f1,
        })
    }

    /// Unweighted mean F1 over `ids`.
    pub fn macro_f1_over(&self, ids: &[&str]) -> Result<f64, EvalError> {
        if ids.is_empty() {
            return Err(EvalError::Empty("pathology subset"));
        }
        let mut sum = 0.0;
        for id in ids {
            let (_, s) = self
                .per_pathology
                .iter()
                .find(|(p, _)| p == id)
                .ok_or_else(|| EvalError::InvalidArgument(format!("no scores for '{id}'")))?;
            sum += s.f1;
        }
        Ok(sum / ids.len() as f64)
    }

    pub fn classification(&self) -> ClassificationMetrics {
        ClassificationMetrics::from_per_pathology(self.per_pathology.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortResult {
    pub cases: Vec<CaseResult>,
    pub metrics: MetricsBundle,
}

fn lat_str(l: Option<Laterality>) -> &'static str {
    l.map_or("", Laterality::as_str)
}

impl CohortResult {
    pub fn csv_header() -> String {
        let mut h = String::from("study_id");
        for prefix in ["pred", "gold"] {
            for (id, _) in PATHOLOGIES {
                let _ = write!(h, ",{prefix}_{id}");
            }
        }
        h.push_str(",bleu1,rouge_l,meteor,laterality_pred,laterality_gold");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for c in &self.cases {
            out.push_str(&csv_field(&c.study_id));
            for set in [&c.predicted, &c.gold] {
                for (_, v) in set.iter() {
                    out.push_str(if v { ",1" } else { ",0" });
                }
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{}",
                c.bleu1,
                c.rouge_l,
                c.meteor,
                lat_str(c.laterality_pred),
                lat_str(c.laterality_gold)
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Score every case and aggregate. Cases run under `exec`; results keep case
/// order and the first failing case (in order) is reported.
pub fn evaluate_cohort(
    cases: &[CaseInput],
    classifier: &dyn LabelClassifier,
    lexicon: &Lexicon,
    exec: Execution,
) -> Result<CohortResult, EvalError> {
    let rows = exec.map_slice(cases, |c| -> Result<CaseResult, EvalError> {
        Ok(CaseResult {
            study_id: c.study_id.clone(),
            predicted: classifier.classify(&c.generated)?,
            gold: c.gold.labels,
            bleu1: bleu1(&c.generated, &c.reference),
            rouge_l: rouge_l(&c.generated, &c.reference),
            meteor: meteor_exact(&c.generated, &c.reference),
            laterality_pred: predict_laterality(&c.generated, lexicon),
            laterality_gold: c.gold.laterality,
        })
    });
    let cases = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let metrics = MetricsBundle::from_cases(&cases)?;
    Ok(CohortResult { cases, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub metrics: Option<MetricsBundle>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweep {
    pub rows: Vec<KSweepRow>,
}

impl KSweep {
    /// `k,macro_f1,bleu1,rouge_l,meteor`; failed rows keep their k with empty
    /// fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,macro_f1,bleu1,rouge_l,meteor\n");
        for r in &self.rows {
            match &r.metrics {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        r.k, m.macro_f1, m.bleu1, m.rouge_l, m.meteor
                    );
                }
                None => {
                    let _ = writeln!(out, "{},,,,", r.k);
                }
            }
        }
        out
    }
}

/// One cohort evaluation per k, ascending. `runner` produces the generated
/// reports for a given k; its errors are recorded on that row.
pub fn k_sweep<F>(
    ks: &[usize],
    mut runner: F,
    classifier: &dyn LabelClassifier,
    lexicon: &Lexicon,
    exec: Execution,
) -> Result<KSweep, EvalError>
where
    F: FnMut(usize) -> Result<Vec<CaseInput>, String>,
{
    let ks: BTreeSet<usize> = ks.iter().copied().collect();
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidArgument(
            "k values must be positive and non-empty".into(),
        ));
    }
    let rows = ks
        .into_iter()
        .map(|k| {
            let result = runner(k).and_then(|cases| {
                evaluate_cohort(&cases, classifier, lexicon, exec)
                    .map(|r| r.metrics)
                    .map_err(|e| e.to_string())
            });
            match result {
                Ok(m) => KSweepRow {
                    k,
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => KSweepRow {
                    k,
                    metrics: None,
                    error: Some(e),
                },
            }
        })
        .collect();
    Ok(KSweep { rows })
}

/// The `ceil(decile * n)` studies with the largest lung volume, ties broken
/// by study id ascending.
pub fn oversegmentation_flag(
    lung_volumes: &BTreeMap<String, f64>,
    decile: f64,
) -> Result<BTreeSet<String>, EvalError> {
    if lung_volumes.is_empty() {
        return Err(EvalError::Empty("lung volumes"));
    }
    if !(decile > 0.0 && decile < 1.0) {
        return Err(EvalError::InvalidArgument(format!(
            "decile {decile} outside (0, 1)"
        )));
    }
    if let Some((id, _)) = lung_volumes.iter().find(|(_, v)| !v.is_finite()) {
        return Err(EvalError::InvalidArgument(format!(
            "non-finite lung volume for '{id}'"
        )));
    }
    let n = lung_volumes.len();
    // guard against products like 0.1 * 30 = 3.0000000000000004
    let count = ((decile * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<(&String, f64)> = lung_volumes.iter().map(|(k, v)| (k, *v)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(order
        .into_iter()
        .take(count)
        .map(|(k, _)| k.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub full_macro_f1_all: f64,
    pub subset_macro_f1_all: f64,
    pub delta_all: f64,
    pub full_macro_f1_lung: f64,
    pub subset_macro_f1_lung: f64,
    pub delta_lung: f64,
}

impl SensitivityReport {
    pub fn from_scalars(full_all: f64, subset_all: f64, full_lung: f64, subset_lung: f64) -> Self {
        Self {
            full_macro_f1_all: full_all,
            subset_macro_f1_all: subset_all,
            delta_all: subset_all - full_all,
            full_macro_f1_lung: full_lung,
            subset_macro_f1_lung: subset_lung,
            delta_lung: subset_lung - full_lung,
        }
    }
}

/// Macro-F1 change from the full cohort to the flagged subset, over all
/// pathologies and over `lung_ids`.
pub fn sensitivity_report(
    full: &MetricsBundle,
    subset: &MetricsBundle,
    lung_ids: &[&str],
) -> Result<SensitivityReport, EvalError> {
    Ok(SensitivityReport::from_scalars(
        full.macro_f1,
        subset.macro_f1,
        full.macro_f1_over(lung_ids)?,
        subset.macro_f1_over(lung_ids)?,
    ))
}
