use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::EvalError;
use crate::pathology::{self, PATHOLOGIES, PATHOLOGY_COUNT};
use crate::snippets::canonical_negative;
use crate::volume::Laterality;

pub const DEFAULT_LEXICON_JSON: &str = include_str!("../../data/default_lexicon.json");

/// Presence flags for all 18 pathologies, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelSet([bool; PATHOLOGY_COUNT]);

impl LabelSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_array(values: [bool; PATHOLOGY_COUNT]) -> Self {
        Self(values)
    }

    /// Positives given by id; every other pathology is absent.
    pub fn from_positives<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<Self, EvalError> {
        let mut s = Self::none();
        for id in ids {
            s.set(id, true)?;
        }
        Ok(s)
    }

    pub fn get(&self, id: &str) -> Option<bool> {
        pathology::index_of(id).map(|i| self.0[i])
    }

    pub fn at(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, id: &str, value: bool) -> Result<(), EvalError> {
        let i = pathology::index_of(id)
            .ok_or_else(|| EvalError::Labels(format!("unknown pathology '{id}'")))?;
        self.0[i] = value;
        Ok(())
    }

    pub fn as_array(&self) -> &[bool; PATHOLOGY_COUNT] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, bool)> + '_ {
        PATHOLOGIES.iter().zip(self.0).map(|((id, _), v)| (*id, v))
    }

    pub fn positives(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.iter().filter(|(_, v)| *v).map(|(id, _)| id)
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_map(self.iter())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    /// All 18 keys are required.
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, bool>::deserialize(deserializer)?;
        let mut out = [None; PATHOLOGY_COUNT];
        for (k, v) in map {
            let i = pathology::index_of(&k)
                .ok_or_else(|| D::Error::custom(format!("unknown pathology '{k}'")))?;
            out[i] = Some(v);
        }
        let mut values = [false; PATHOLOGY_COUNT];
        for (i, v) in out.into_iter().enumerate() {
            values[i] = v.ok_or_else(|| {
                D::Error::custom(format!("missing pathology '{}'", PATHOLOGIES[i].0))
            })?;
        }
        Ok(Self(values))
    }
}

/// Gold file content for one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabels {
    pub labels: LabelSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laterality: Option<Laterality>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LateralityTerms {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub bilateral: Vec<String>,
}

/// Per-pathology term lists plus negation cues, all matched case-insensitively
/// at word starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub negation_cues: Vec<String>,
    pub laterality: LateralityTerms,
    pub terms: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn from_json(json: &str) -> Result<Self, EvalError> {
        let mut lex: Self = serde_json::from_str(json)?;
        lex.normalize();
        lex.validate()?;
        Ok(lex)
    }

    pub fn default_lexicon() -> Self {
        Self::from_json(DEFAULT_LEXICON_JSON).expect("bundled lexicon is valid")
    }

    fn normalize(&mut self) {
        let lower = |v: &mut Vec<String>| v.iter_mut().for_each(|t| *t = t.to_lowercase());
        lower(&mut self.negation_cues);
        lower(&mut self.laterality.left);
        lower(&mut self.laterality.right);
        lower(&mut self.laterality.bilateral);
        self.terms.values_mut().for_each(lower);
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for id in self.terms.keys() {
            if pathology::index_of(id).is_none() {
                return Err(EvalError::Lexicon(format!("unknown pathology '{id}'")));
            }
        }
        for (id, _) in PATHOLOGIES {
            match self.terms.get(id) {
                None => return Err(EvalError::Lexicon(format!("no terms for '{id}'"))),
                Some(t) if t.is_empty() || t.iter().any(|s| s.trim().is_empty()) => {
                    return Err(EvalError::Lexicon(format!(
                        "empty term list or term for '{id}'"
                    )))
                }
                _ => {}
            }
        }
        if self.negation_cues.iter().any(|c| c.trim().is_empty()) {
            return Err(EvalError::Lexicon("empty negation cue".into()));
        }
        Ok(())
    }

    pub fn terms(&self, id: &str) -> &[String] {
        self.terms.get(id).map_or(&[], Vec::as_slice)
    }
}

/// Split on `.`, `;` and newlines; pieces are trimmed and empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    text.split(['.', ';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Byte offsets where `needle` occurs in `hay` at a word start.
pub(crate) fn word_start_matches<'a>(
    hay: &'a str,
    needle: &'a str,
) -> impl Iterator<Item = usize> + 'a {
    hay.match_indices(needle).map(|(i, _)| i).filter(move |&i| {
        hay[..i]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric())
    })
}

fn first_match(hay: &str, needles: &[String]) -> Option<usize> {
    needles
        .iter()
        .filter_map(|n| word_start_matches(hay, n).next())
        .min()
}

/// True when `sentence` (already lowercased) asserts a term of `terms`:
/// some term occurs with no negation cue before it.
pub(crate) fn asserts(lower: &str, terms: &[String], cues: &[String]) -> bool {
    let Some(term_at) = first_match(lower, terms) else {
        return false;
    };
    match first_match(lower, cues) {
        Some(cue_at) => term_at < cue_at,
        None => true,
    }
}

/// Rule-based labels: a pathology is present when some sentence mentions one
/// of its terms with no negation cue before it and the sentence is not the
/// pathology's canonical negative.
pub fn derive_labels(report: &str, lexicon: &Lexicon) -> LabelSet {
    let sentences: Vec<String> = split_sentences(report)
        .into_iter()
        .map(str::to_lowercase)
        .collect();
    let mut out = LabelSet::none();
    for (i, (id, name)) in PATHOLOGIES.iter().enumerate() {
        let canonical = canonical_negative(name).to_lowercase();
        let canonical = canonical.trim_end_matches('.');
        out.0[i] = sentences
            .iter()
            .any(|s| s != canonical && asserts(s, lexicon.terms(id), &lexicon.negation_cues));
    }
    out
}
