use std::borrow::Cow;
use std::collections::HashMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::features::{
    absolute_volume, axial_extent, hu_statistics, laterality_fractions, orientation_fractions,
    relative_volume, thickness, HuStats,
};
use super::registry::{FeatureKind, ToolSpec};
use super::HU_PERCENTILES;
use crate::volume::{voxel_center, Mask, StudyBundle};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureVectorError {
    #[error("feature names and values differ in length")]
    Length,
    #[error("duplicate feature '{0}'")]
    Duplicate(String),
    #[error("undefined feature '{0}' is not in the vector")]
    UnknownUndefined(String),
    #[error("undefined feature '{0}' must carry 0.0")]
    NonZeroUndefined(String),
    #[error("feature '{0}' is not finite")]
    NonFinite(String),
}

/// Ordered named descriptors produced by one tool.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub schema_id: String,
    pub pathology_id: String,
    names: Vec<String>,
    values: Vec<f64>,
    undefined: Vec<bool>,
}

impl FeatureVector {
    /// Build from `(name, value)` pairs in schema order; `undefined` lists the
    /// flagged names, whose values must be 0.0.
    pub fn new(
        schema_id: impl Into<String>,
        pathology_id: impl Into<String>,
        features: Vec<(String, f64)>,
        undefined: &[String],
    ) -> Result<Self, FeatureVectorError> {
        let (names, values): (Vec<String>, Vec<f64>) = features.into_iter().unzip();
        let mut flags = vec![false; names.len()];
        for u in undefined {
            let i = names
                .iter()
                .position(|n| n == u)
                .ok_or_else(|| FeatureVectorError::UnknownUndefined(u.clone()))?;
            flags[i] = true;
        }
        Self::from_parts(schema_id.into(), pathology_id.into(), names, values, flags)
    }

    fn from_parts(
        schema_id: String,
        pathology_id: String,
        names: Vec<String>,
        values: Vec<f64>,
        undefined: Vec<bool>,
    ) -> Result<Self, FeatureVectorError> {
        if names.len() != values.len() || names.len() != undefined.len() {
            return Err(FeatureVectorError::Length);
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(FeatureVectorError::Duplicate(n.clone()));
            }
            if !values[i].is_finite() {
                return Err(FeatureVectorError::NonFinite(n.clone()));
            }
            if undefined[i] && values[i] != 0.0 {
                return Err(FeatureVectorError::NonZeroUndefined(n.clone()));
            }
        }
        Ok(Self {
            schema_id,
            pathology_id,
            names,
            values,
            undefined,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    pub fn is_undefined(&self, name: &str) -> bool {
        self.names
            .iter()
            .position(|n| n == name)
            .is_some_and(|i| self.undefined[i])
    }

    pub fn undefined_flags(&self) -> &[bool] {
        &self.undefined
    }

    pub fn undefined_names(&self) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.undefined)
            .filter(|(_, &u)| u)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// `(name, value, undefined)` in schema order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.undefined)
            .map(|((n, &v), &u)| (n.as_str(), v, u))
    }

    /// A vector with every feature of `tool` flagged.
    pub fn all_undefined(schema_id: &str, tool: &ToolSpec) -> Self {
        let n = tool.feature_list.len();
        Self {
            schema_id: schema_id.to_string(),
            pathology_id: tool.pathology_id.clone(),
            names: tool.feature_list.clone(),
            values: vec![0.0; n],
            undefined: vec![true; n],
        }
    }

    /// The `features` object: names in schema order.
    pub fn features_json(&self) -> serde_json::Map<String, serde_json::Value> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, &v)| (n.clone(), serde_json::Value::from(v)))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureVectorRepr {
    schema_id: String,
    pathology: String,
    features: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    undefined: Vec<String>,
}

impl Serialize for FeatureVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        FeatureVectorRepr {
            schema_id: self.schema_id.clone(),
            pathology: self.pathology_id.clone(),
            features: self.features_json(),
            undefined: self.undefined_names(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FeatureVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = FeatureVectorRepr::deserialize(deserializer)?;
        let features = repr
            .features
            .into_iter()
            .map(|(k, v)| {
                v.as_f64()
                    .map(|f| (k.clone(), f))
                    .ok_or_else(|| D::Error::custom(format!("feature '{k}' is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        FeatureVector::new(repr.schema_id, repr.pathology, features, &repr.undefined)
            .map_err(D::Error::custom)
    }
}

/// Midsagittal and midcoronal plane positions in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Midplanes {
    pub midline_x_mm: f64,
    pub midcoronal_y_mm: f64,
}

const LUNG_STRUCTURES: [&str; 3] = ["lung_left", "lung_right", "lungs"];

/// Planes from the centroid of the union of lung masks, or the grid center
/// when the study has no lung mask.
pub fn estimate_midplanes(study: &StudyBundle) -> Midplanes {
    let dims = study.volume.dims();
    let spacing = study.volume.spacing();
    let lungs: Vec<&Mask> = LUNG_STRUCTURES
        .iter()
        .filter_map(|s| study.mask(s))
        .collect();
    let n = dims[0] * dims[1] * dims[2];
    let (mut sx, mut sy, mut count) = (0.0f64, 0.0f64, 0usize);
    for i in 0..n {
        if lungs.iter().any(|m| m.voxels()[i] == 1) {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            sx += voxel_center(x, spacing[0]);
            sy += voxel_center(y, spacing[1]);
            count += 1;
        }
    }
    if count == 0 {
        return Midplanes {
            midline_x_mm: dims[0] as f64 / 2.0 * spacing[0],
            midcoronal_y_mm: dims[1] as f64 / 2.0 * spacing[1],
        };
    }
    Midplanes {
        midline_x_mm: sx / count as f64,
        midcoronal_y_mm: sy / count as f64,
    }
}

/// Look up a structure mask; `lungs` falls back to the union of the
/// per-side lung masks.
pub fn resolve_structure<'a>(study: &'a StudyBundle, structure: &str) -> Option<Cow<'a, Mask>> {
    if let Some(m) = study.mask(structure) {
        return Some(Cow::Borrowed(m));
    }
    if structure == "lungs" {
        return match (study.mask("lung_left"), study.mask("lung_right")) {
            (Some(l), Some(r)) => l.union(r, "lungs").ok().map(Cow::Owned),
            (Some(one), None) | (None, Some(one)) => {
                Some(Cow::Owned(one.clone().with_structure_id("lungs")))
            }
            (None, None) => None,
        };
    }
    None
}

/// Evaluate every feature of `tool` on `study`, in schema order.
pub fn run_tool(
    study: &StudyBundle,
    tool: &ToolSpec,
    schema_id: &str,
    planes: Midplanes,
) -> FeatureVector {
    let Ok(parsed) = tool.parsed_features() else {
        return FeatureVector::all_undefined(schema_id, tool);
    };
    let mut masks: HashMap<&str, Cow<'_, Mask>> = HashMap::new();
    for s in &tool.required_structures {
        match resolve_structure(study, s) {
            Some(m) => {
                masks.insert(s.as_str(), m);
            }
            None => return FeatureVector::all_undefined(schema_id, tool),
        }
    }

    let lungs = resolve_structure(study, "lungs");
    let heart = study.mask("heart");
    let mut hu_cache: HashMap<&str, Option<HuStats>> = HashMap::new();

    let mut values = Vec::with_capacity(parsed.len());
    let mut undefined = vec![false; parsed.len()];
    for (i, f) in parsed.iter().enumerate() {
        let mask = &masks[f.structure.as_str()];
        let value = match f.kind {
            FeatureKind::VolumeMm3 => Some(absolute_volume(mask)),
            FeatureKind::VolumeRelLungs => lungs.as_deref().and_then(|r| relative_volume(mask, r)),
            FeatureKind::VolumeRelHeart => heart.and_then(|r| relative_volume(mask, r)),
            FeatureKind::AxialExtentMm => Some(axial_extent(mask)),
            FeatureKind::ThicknessMm => Some(thickness(mask)),
            FeatureKind::LeftFraction => {
                laterality_fractions(mask, planes.midline_x_mm).map(|p| p.0)
            }
            FeatureKind::RightFraction => {
                laterality_fractions(mask, planes.midline_x_mm).map(|p| p.1)
            }
            FeatureKind::AnteriorFraction => {
                orientation_fractions(mask, planes.midcoronal_y_mm).map(|p| p.0)
            }
            FeatureKind::PosteriorFraction => {
                orientation_fractions(mask, planes.midcoronal_y_mm).map(|p| p.1)
            }
            kind => {
                let stats = hu_cache.entry(f.structure.as_str()).or_insert_with(|| {
                    hu_statistics(&study.volume, mask, &HU_PERCENTILES, tool.hu_window)
                });
                stats.as_ref().map(|s| match kind {
                    FeatureKind::HuMean => s.mean,
                    FeatureKind::HuMin => s.min,
                    FeatureKind::HuMax => s.max,
                    k => s
                        .percentile(k.percentile().expect("percentile kind"))
                        .expect("requested"),
                })
            }
        };
        match value {
            Some(v) => values.push(v),
            None => {
                values.push(0.0);
                undefined[i] = true;
            }
        }
    }

    FeatureVector::from_parts(
        schema_id.to_string(),
        tool.pathology_id.clone(),
        tool.feature_list.clone(),
        values,
        undefined,
    )
    .expect("tool output satisfies the feature vector invariants")
}
