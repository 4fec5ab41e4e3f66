use super::labels::{asserts, split_sentences, word_start_matches};
use super::{EvalError, Lexicon, Prf1};
use crate::volume::Laterality;

/// Side of the pleural effusion asserted by `report`, if any. Sides are
/// collected from every non-negated effusion sentence and merged.
pub fn predict_laterality(report: &str, lexicon: &Lexicon) -> Option<Laterality> {
    let terms = lexicon.terms("PleuralEffusion");
    let has = |s: &str, words: &[String]| {
        words
            .iter()
            .any(|w| word_start_matches(s, w).next().is_some())
    };
    let mut out: Option<Laterality> = None;
    for sentence in split_sentences(report) {
        let s = sentence.to_lowercase();
        if !asserts(&s, terms, &lexicon.negation_cues) {
            continue;
        }
        let lat = &lexicon.laterality;
        let side = if has(&s, &lat.bilateral) || (has(&s, &lat.left) && has(&s, &lat.right)) {
            Some(Laterality::Bilateral)
        } else if has(&s, &lat.left) {
            Some(Laterality::Left)
        } else if has(&s, &lat.right) {
            Some(Laterality::Right)
        } else {
            None
        };
        if let Some(side) = side {
            out = Some(out.map_or(side, |o| o.merge(side)));
        }
    }
    out
}

/// Micro-averaged F1 over {left, right, bilateral}. An unpredicted case
/// counts as a wrong prediction, so precision and recall both equal
/// correct / n.
pub fn laterality_eval(
    reports: &[&str],
    gold: &[Laterality],
    lexicon: &Lexicon,
) -> Result<Prf1, EvalError> {
    if reports.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: reports.len(),
            right: gold.len(),
        });
    }
    if reports.is_empty() {
        return Err(EvalError::Empty("laterality cases"));
    }
    let correct = reports
        .iter()
        .zip(gold)
        .filter(|(r, g)| predict_laterality(r, lexicon) == Some(**g))
        .count();
    let wrong = reports.len() - correct;
    Ok(Prf1::from_counts(correct, wrong, wrong))
}
