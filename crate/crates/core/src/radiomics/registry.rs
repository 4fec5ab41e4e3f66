//! Tool registry: which structures and descriptors each pathology tool uses.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The registry shipped with the crate: 18 tools, 86 feature dimensions.
pub const DEFAULT_REGISTRY_JSON: &str = include_str!("../../data/default_registry.json");

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tool '{0}' has an empty feature list")]
    EmptyFeatureList(String),
    #[error("tool '{tool}' lists feature '{feature}' twice")]
    DuplicateFeature { tool: String, feature: String },
    #[error("pathology '{0}' is registered twice")]
    DuplicatePathology(String),
    #[error("tool '{tool}' requires unknown structure '{structure}'")]
    UnknownStructure { tool: String, structure: String },
    #[error("tool '{tool}': {reason}")]
    BadFeature { tool: String, reason: String },
    #[error("unknown pathology '{0}'")]
    UnknownPathology(String),
}

/// One descriptor family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    VolumeMm3,
    VolumeRelLungs,
    VolumeRelHeart,
    AxialExtentMm,
    ThicknessMm,
    LeftFraction,
    RightFraction,
    AnteriorFraction,
    PosteriorFraction,
    HuMean,
    HuMin,
    HuMax,
    HuP5,
    HuP25,
    HuP50,
    HuP75,
    HuP95,
}

const KIND_NAMES: [(FeatureKind, &str); 17] = [
    (FeatureKind::VolumeMm3, "volume_mm3"),
    (FeatureKind::VolumeRelLungs, "volume_rel_lungs"),
    (FeatureKind::VolumeRelHeart, "volume_rel_heart"),
    (FeatureKind::AxialExtentMm, "axial_extent_mm"),
    (FeatureKind::ThicknessMm, "thickness_mm"),
    (FeatureKind::LeftFraction, "left_fraction"),
    (FeatureKind::RightFraction, "right_fraction"),
    (FeatureKind::AnteriorFraction, "anterior_fraction"),
    (FeatureKind::PosteriorFraction, "posterior_fraction"),
    (FeatureKind::HuMean, "hu_mean"),
    (FeatureKind::HuMin, "hu_min"),
    (FeatureKind::HuMax, "hu_max"),
    (FeatureKind::HuP5, "hu_p5"),
    (FeatureKind::HuP25, "hu_p25"),
    (FeatureKind::HuP50, "hu_p50"),
    (FeatureKind::HuP75, "hu_p75"),
    (FeatureKind::HuP95, "hu_p95"),
];

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        KIND_NAMES
            .iter()
            .find(|(k, _)| *k == self)
            .map(|(_, n)| *n)
            .unwrap()
    }

    pub fn percentile(self) -> Option<f64> {
        match self {
            FeatureKind::HuP5 => Some(5.0),
            FeatureKind::HuP25 => Some(25.0),
            FeatureKind::HuP50 => Some(50.0),
            FeatureKind::HuP75 => Some(75.0),
            FeatureKind::HuP95 => Some(95.0),
            _ => None,
        }
    }

    pub fn is_intensity(self) -> bool {
        matches!(
            self,
            FeatureKind::HuMean | FeatureKind::HuMin | FeatureKind::HuMax
        ) || self.percentile().is_some()
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KIND_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| format!("unknown descriptor '{s}'"))
    }
}

/// A parsed feature name of the form `<structure>.<descriptor>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRef {
    pub structure: String,
    pub kind: FeatureKind,
}

impl FromStr for FeatureRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (structure, kind) = s
            .rsplit_once('.')
            .ok_or_else(|| format!("feature '{s}' is not '<structure>.<descriptor>'"))?;
        if structure.is_empty() {
            return Err(format!("feature '{s}' has an empty structure"));
        }
        Ok(FeatureRef {
            structure: structure.to_string(),
            kind: kind.parse()?,
        })
    }
}

impl fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.structure, self.kind.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub pathology_id: String,
    pub display_name: String,
    /// One line shown to the agent in the tool catalog.
    #[serde(default)]
    pub description: String,
    pub required_structures: Vec<String>,
    pub feature_list: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hu_window: Option<(i16, i16)>,
}

impl ToolSpec {
    pub fn parsed_features(&self) -> Result<Vec<FeatureRef>, RegistryError> {
        self.feature_list
            .iter()
            .map(|f| {
                f.parse().map_err(|reason| RegistryError::BadFeature {
                    tool: self.pathology_id.clone(),
                    reason,
                })
            })
            .collect()
    }

    pub fn dimension(&self) -> usize {
        self.feature_list.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRegistry {
    pub schema_id: String,
    /// Known structure ids. `lungs` resolves to the union of the lung masks
    /// when the study has no dedicated `lungs` mask.
    pub structures: Vec<String>,
    pub tools: Vec<ToolSpec>,
}

impl ToolRegistry {
    pub fn from_json(json: &str) -> Result<Self, RegistryError> {
        let reg: ToolRegistry = serde_json::from_str(json)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn default_registry() -> Self {
        Self::from_json(DEFAULT_REGISTRY_JSON).expect("bundled registry is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let known: HashSet<&str> = self.structures.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        for tool in &self.tools {
            if !seen.insert(tool.pathology_id.as_str()) {
                return Err(RegistryError::DuplicatePathology(tool.pathology_id.clone()));
            }
            if tool.feature_list.is_empty() {
                return Err(RegistryError::EmptyFeatureList(tool.pathology_id.clone()));
            }
            for s in &tool.required_structures {
                if !known.contains(s.as_str()) {
                    return Err(RegistryError::UnknownStructure {
                        tool: tool.pathology_id.clone(),
                        structure: s.clone(),
                    });
                }
            }
            let mut names = BTreeSet::new();
            for (name, parsed) in tool.feature_list.iter().zip(tool.parsed_features()?) {
                if !names.insert(name.as_str()) {
                    return Err(RegistryError::DuplicateFeature {
                        tool: tool.pathology_id.clone(),
                        feature: name.clone(),
                    });
                }
                if !tool.required_structures.contains(&parsed.structure) {
                    return Err(RegistryError::BadFeature {
                        tool: tool.pathology_id.clone(),
                        reason: format!(
                            "feature '{name}' uses structure '{}' not in required_structures",
                            parsed.structure
                        ),
                    });
                }
            }
            if let Some((lo, hi)) = tool.hu_window {
                if lo > hi {
                    return Err(RegistryError::BadFeature {
                        tool: tool.pathology_id.clone(),
                        reason: format!("hu_window ({lo}, {hi}) is empty"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn tool(&self, pathology_id: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.pathology_id == pathology_id)
    }

    pub fn pathology_ids(&self) -> impl Iterator<Item = &str> {
        self.tools.iter().map(|t| t.pathology_id.as_str())
    }

    /// Total feature dimension over all tools.
    pub fn dimension(&self) -> usize {
        self.tools.iter().map(ToolSpec::dimension).sum()
    }
}
