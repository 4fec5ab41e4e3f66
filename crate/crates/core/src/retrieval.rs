//! Pathology-partitioned reference space with exact standardized L2 k-NN.
//!
//! Each partition holds the reference entries of one pathology. Features are
//! z-scored with the partition's population mean and standard deviation
//! (dimensions with std below 1e-12 get std 1.0) and queries are answered by
//! a full distance scan, ordered by `(distance, entry_id)`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::radiomics::FeatureVector;
use crate::Execution;

/// Standard deviations below this are treated as zero variance.
pub const ZERO_VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no reference entries")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("unknown pathology '{0}'")]
    UnknownPathology(String),
    #[error("schema mismatch in '{pathology}': {reason}")]
    SchemaMismatch { pathology: String, reason: String },
    #[error("duplicate entry_id {entry_id} in '{pathology}'")]
    DuplicateEntryId { pathology: String, entry_id: u64 },
    #[error("entry {entry_id} in '{pathology}' has an empty snippet")]
    EmptySnippet { pathology: String, entry_id: u64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("stats and entries disagree: {0}")]
    PartitionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// One `(features, snippet)` pair of the reference space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub entry_id: u64,
    pub pathology_id: String,
    pub features: FeatureVector,
    pub snippet: String,
    pub source_id: String,
}

/// Per-dimension population moments of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStats {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    /// Strictly positive after the zero-variance rule.
    pub stds: Vec<f64>,
}

impl PartitionStats {
    /// Population moments over `rows` (each of length `names.len()`).
    pub fn from_rows<'a>(
        names: Vec<String>,
        rows: impl Iterator<Item = &'a [f64]> + Clone,
    ) -> Self {
        let d = names.len();
        let n = rows.clone().count() as f64;
        let mut means = vec![0.0; d];
        for row in rows.clone() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; d];
        for row in rows {
            for ((acc, v), m) in vars.iter_mut().zip(row).zip(&means) {
                *acc += (v - m) * (v - m);
            }
        }
        let stds = vars
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < ZERO_VARIANCE_EPS {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { names, means, stds }
    }

    pub fn dimension(&self) -> usize {
        self.names.len()
    }
}

/// `(value - mean) / std` per dimension, in schema order.
pub fn standardize(fv: &FeatureVector, stats: &PartitionStats) -> Result<Vec<f64>> {
    if fv.names() != stats.names.as_slice() {
        return Err(RetrievalError::SchemaMismatch {
            pathology: fv.pathology_id.clone(),
            reason: "feature names differ from the partition schema".into(),
        });
    }
    Ok(standardize_values(fv.values(), stats))
}

fn standardize_values(values: &[f64], stats: &PartitionStats) -> Vec<f64> {
    values
        .iter()
        .zip(&stats.means)
        .zip(&stats.stds)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub entry_id: u64,
    pub distance: f64,
    pub snippet: String,
}

/// Nearest reference entries in ascending distance, ties by entry id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub neighbors: Vec<Neighbor>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.entry_id).collect()
    }
}

#[derive(Debug, Clone)]
struct Partition {
    stats: PartitionStats,
    entries: Vec<ReferenceEntry>,
    /// Row-major `entries.len() x d`.
    standardized: Vec<f64>,
}

impl Partition {
    fn build(
        pathology: &str,
        entries: Vec<ReferenceEntry>,
        stats: Option<PartitionStats>,
    ) -> Result<Self> {
        let first = entries.first().ok_or(RetrievalError::Empty)?;
        let names = first.features.names().to_vec();
        let mut ids = HashSet::new();
        for e in &entries {
            if e.features.names() != names.as_slice() {
                return Err(RetrievalError::SchemaMismatch {
                    pathology: pathology.to_string(),
                    reason: format!("entry {} has a different feature list", e.entry_id),
                });
            }
            if !ids.insert(e.entry_id) {
                return Err(RetrievalError::DuplicateEntryId {
                    pathology: pathology.to_string(),
                    entry_id: e.entry_id,
                });
            }
            if e.snippet.trim().is_empty() {
                return Err(RetrievalError::EmptySnippet {
                    pathology: pathology.to_string(),
                    entry_id: e.entry_id,
                });
            }
        }
        let stats = match stats {
            Some(s) => {
                if s.names != names {
                    return Err(RetrievalError::PartitionMismatch(format!(
                        "stats for '{pathology}' name different features than its entries"
                    )));
                }
                s
            }
            None => PartitionStats::from_rows(names, entries.iter().map(|e| e.features.values())),
        };
        let standardized = entries
            .iter()
            .flat_map(|e| standardize_values(e.features.values(), &stats))
            .collect();
        Ok(Self {
            stats,
            entries,
            standardized,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.stats.dimension();
        &self.standardized[i * d..(i + 1) * d]
    }
}

/// Immutable reference space; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Index {
    schema_id: String,
    partitions: BTreeMap<String, Partition>,
}

impl Index {
    /// Partition `entries` by pathology and standardize each partition.
    pub fn build(entries: Vec<ReferenceEntry>) -> Result<Self> {
        Self::assemble(entries, None)
    }

    fn assemble(
        entries: Vec<ReferenceEntry>,
        stats: Option<BTreeMap<String, PartitionStats>>,
    ) -> Result<Self> {
        let schema_id = entries
            .first()
            .ok_or(RetrievalError::Empty)?
            .features
            .schema_id
            .clone();
        let mut grouped: BTreeMap<String, Vec<ReferenceEntry>> = BTreeMap::new();
        for e in entries {
            if e.features.schema_id != schema_id {
                return Err(RetrievalError::SchemaMismatch {
                    pathology: e.pathology_id.clone(),
                    reason: format!(
                        "schema '{}' differs from '{schema_id}'",
                        e.features.schema_id
                    ),
                });
            }
            if e.features.pathology_id != e.pathology_id {
                return Err(RetrievalError::SchemaMismatch {
                    pathology: e.pathology_id.clone(),
                    reason: format!(
                        "entry {} carries features of '{}'",
                        e.entry_id, e.features.pathology_id
                    ),
                });
            }
            grouped.entry(e.pathology_id.clone()).or_default().push(e);
        }
        let mut stats = stats;
        if let Some(s) = &stats {
            let a: Vec<_> = s.keys().collect();
            let b: Vec<_> = grouped.keys().collect();
            if a != b {
                return Err(RetrievalError::PartitionMismatch(format!(
                    "stats cover {a:?} but entries cover {b:?}"
                )));
            }
        }
        let mut partitions = BTreeMap::new();
        for (pathology, group) in grouped {
            let s = stats.as_mut().and_then(|m| m.remove(&pathology));
            partitions.insert(pathology.clone(), Partition::build(&pathology, group, s)?);
        }
        Ok(Self {
            schema_id,
            partitions,
        })
    }

    pub fn schema_id(&self) -> &str {
        &self.schema_id
    }

    pub fn pathologies(&self) -> impl Iterator<Item = &str> {
        self.partitions.keys().map(String::as_str)
    }

    pub fn partition_len(&self, pathology: &str) -> Option<usize> {
        self.partitions.get(pathology).map(|p| p.entries.len())
    }

    pub fn stats(&self, pathology: &str) -> Option<&PartitionStats> {
        self.partitions.get(pathology).map(|p| &p.stats)
    }

    pub fn entries(&self, pathology: &str) -> Option<&[ReferenceEntry]> {
        self.partitions.get(pathology).map(|p| p.entries.as_slice())
    }

    /// Standardized copy of the stored entry at `position` in its partition.
    pub fn standardized_row(&self, pathology: &str, position: usize) -> Option<&[f64]> {
        let p = self.partitions.get(pathology)?;
        (position < p.entries.len()).then(|| p.row(position))
    }

    pub fn knn_query(
        &self,
        pathology: &str,
        fv: &FeatureVector,
        k: usize,
    ) -> Result<RetrievalResult> {
        self.knn_query_with(pathology, fv, k, Execution::default())
    }

    pub fn knn_query_with(
        &self,
        pathology: &str,
        fv: &FeatureVector,
        k: usize,
        exec: Execution,
    ) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let part = self
            .partitions
            .get(pathology)
            .ok_or_else(|| RetrievalError::UnknownPathology(pathology.to_string()))?;
        if fv.schema_id != self.schema_id {
            return Err(RetrievalError::SchemaMismatch {
                pathology: pathology.to_string(),
                reason: format!(
                    "query schema '{}' differs from '{}'",
                    fv.schema_id, self.schema_id
                ),
            });
        }
        let query = standardize(fv, &part.stats)?;
        let dists = exec.map_range(part.entries.len(), |i| l2(&query, part.row(i)));

        let mut order: Vec<(f64, u64, usize)> = dists
            .into_iter()
            .enumerate()
            .map(|(i, d)| (d, part.entries[i].entry_id, i))
            .collect();
        let cmp =
            |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(RetrievalResult {
            neighbors: order
                .into_iter()
                .map(|(distance, entry_id, i)| Neighbor {
                    entry_id,
                    distance,
                    snippet: part.entries[i].snippet.clone(),
                })
                .collect(),
        })
    }

    /// Answer many queries against one partition, results in query order.
    pub fn knn_query_batch(
        &self,
        pathology: &str,
        queries: &[FeatureVector],
        k: usize,
        exec: Execution,
    ) -> Result<Vec<RetrievalResult>> {
        exec.map_slice(queries, |q| {
            self.knn_query_with(pathology, q, k, Execution::Sequential)
        })
        .into_iter()
        .collect()
    }

    /// The first line of the JSONL file.
    pub fn stats_line(&self) -> String {
        let partitions: Map<String, Value> = self
            .partitions
            .iter()
            .map(|(p, part)| {
                let named = |vals: &[f64]| -> Map<String, Value> {
                    part.stats
                        .names
                        .iter()
                        .zip(vals)
                        .map(|(n, &v)| (n.clone(), Value::from(v)))
                        .collect()
                };
                (
                    p.clone(),
                    json!({"means": named(&part.stats.means), "stds": named(&part.stats.stds)}),
                )
            })
            .collect();
        json!({"kind": "stats", "schema_id": self.schema_id, "partitions": partitions}).to_string()
    }

    /// Write the index as JSONL: a stats line, then one line per entry.
    pub fn save<W: Write>(&self, mut destination: W) -> Result<()> {
        writeln!(destination, "{}", self.stats_line())?;
        for (p, part) in &self.partitions {
            for e in &part.entries {
                let line = json!({
                    "kind": "entry",
                    "pathology": p,
                    "entry_id": e.entry_id,
                    "features": e.features.features_json(),
                    "undefined": e.features.undefined_names(),
                    "snippet": e.snippet,
                    "source_id": e.source_id,
                });
                writeln!(destination, "{line}")?;
            }
        }
        destination.flush()?;
        Ok(())
    }

    pub fn load<R: BufRead>(source: R) -> Result<Self> {
        let mut stats: Option<BTreeMap<String, PartitionStats>> = None;
        let mut schema_id = String::new();
        let mut entries = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| RetrievalError::Parse {
                line: line_no,
                message,
            };
            if stats.is_none() {
                let s: StatsLine =
                    serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                if s.kind != "stats" {
                    return Err(parse_err(format!(
                        "expected a stats line, found kind '{}'",
                        s.kind
                    )));
                }
                schema_id = s.schema_id;
                let mut parsed = BTreeMap::new();
                for (p, ps) in s.partitions {
                    let names: Vec<String> = ps.means.keys().cloned().collect();
                    let std_names: Vec<&String> = ps.stds.keys().collect();
                    if names.iter().collect::<Vec<_>>() != std_names {
                        return Err(parse_err(format!(
                            "means and stds of '{p}' name different features"
                        )));
                    }
                    let nums =
                        |m: &Map<String, Value>| -> std::result::Result<Vec<f64>, RetrievalError> {
                            m.iter()
                                .map(|(k, v)| {
                                    v.as_f64().ok_or_else(|| {
                                        parse_err(format!("stat '{k}' of '{p}' is not a number"))
                                    })
                                })
                                .collect()
                        };
                    let means = nums(&ps.means)?;
                    let stds = nums(&ps.stds)?;
                    if stds.iter().any(|&s| s.is_nan() || s <= 0.0) {
                        return Err(parse_err(format!("non-positive std in '{p}'")));
                    }
                    parsed.insert(p, PartitionStats { names, means, stds });
                }
                stats = Some(parsed);
                continue;
            }
            let e: EntryLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if e.kind != "entry" {
                return Err(parse_err(format!(
                    "expected an entry line, found kind '{}'",
                    e.kind
                )));
            }
            let features = e
                .features
                .iter()
                .map(|(k, v)| {
                    v.as_f64()
                        .map(|f| (k.clone(), f))
                        .ok_or_else(|| parse_err(format!("feature '{k}' is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            let fv = FeatureVector::new(
                schema_id.clone(),
                e.pathology.clone(),
                features,
                &e.undefined,
            )
            .map_err(|err| parse_err(err.to_string()))?;
            entries.push(ReferenceEntry {
                entry_id: e.entry_id,
                pathology_id: e.pathology,
                features: fv,
                snippet: e.snippet,
                source_id: e.source_id,
            });
        }
        let stats = stats.ok_or(RetrievalError::Empty)?;
        if entries.is_empty() {
            return Err(RetrievalError::Empty);
        }
        Self::assemble(entries, Some(stats))
    }
}

#[derive(Deserialize)]
struct PartitionStatsLine {
    means: Map<String, Value>,
    stds: Map<String, Value>,
}

#[derive(Deserialize)]
struct StatsLine {
    kind: String,
    schema_id: String,
    partitions: BTreeMap<String, PartitionStatsLine>,
}

#[derive(Deserialize)]
struct EntryLine {
    kind: String,
    pathology: String,
    entry_id: u64,
    features: Map<String, Value>,
    #[serde(default)]
    undefined: Vec<String>,
    snippet: String,
    source_id: String,
}
