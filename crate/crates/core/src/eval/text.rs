use std::collections::HashMap;

use serde::Serialize;

use super::{EvalError, LabelSet};
use crate::pathology::{PATHOLOGIES, PATHOLOGY_COUNT};

/// Binary scores on the positive class, with 0/0 taken as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf1 {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    /// Canonical pathology order.
    pub per_pathology: Vec<(String, Prf1)>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl ClassificationMetrics {
    pub fn from_per_pathology(per_pathology: Vec<(String, Prf1)>) -> Self {
        let n = per_pathology.len().max(1) as f64;
        let mean = |f: fn(&Prf1) -> f64| per_pathology.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
        Self {
            macro_precision: mean(|s| s.precision),
            macro_recall: mean(|s| s.recall),
            macro_f1: mean(|s| s.f1),
            per_pathology,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Prf1> {
        self.per_pathology
            .iter()
            .find(|(p, _)| p == id)
            .map(|(_, s)| s)
    }
}

/// Per-pathology binary P/R/F1 and their unweighted means.
pub fn prf1(predicted: &[LabelSet], gold: &[LabelSet]) -> Result<ClassificationMetrics, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: predicted.len(),
            right: gold.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty("label sets"));
    }
    let mut counts = [[0usize; 3]; PATHOLOGY_COUNT];
    for (p, g) in predicted.iter().zip(gold) {
        for (i, c) in counts.iter_mut().enumerate() {
            match (p.at(i), g.at(i)) {
                (true, true) => c[0] += 1,
                (true, false) => c[1] += 1,
                (false, true) => c[2] += 1,
                (false, false) => {}
            }
        }
    }
    let per = PATHOLOGIES
        .iter()
        .zip(counts)
        .map(|((id, _), [tp, fp, fn_])| (id.to_string(), Prf1::from_counts(tp, fp, fn_)))
        .collect();
    Ok(ClassificationMetrics::from_per_pathology(per))
}

/// Lowercase and split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let rc = counts(&refs);
    let clipped: usize = counts(&cand)
        .iter()
        .map(|(w, n)| (*n).min(rc.get(w).copied().unwrap_or(0)))
        .sum();
    let p1 = clipped as f64 / cand.len() as f64;
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * p1
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure over tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&cand, &refs) as f64;
    let p = l / cand.len() as f64;
    let r = l / refs.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Exact-match METEOR variant: greedy left-to-right alignment, recall
/// weighted harmonic mean and a fragmentation penalty of 0.5*(chunks/m)^3.
pub fn meteor_exact(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; refs.len()];
    let mut pairs = Vec::new();
    for (i, t) in cand.iter().enumerate() {
        if let Some(j) = (0..refs.len()).find(|&j| !used[j] && refs[j] == *t) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / refs.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}
