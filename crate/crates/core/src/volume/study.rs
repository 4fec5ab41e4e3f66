use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_mask, load_volume, save_mask, save_volume, Mask, Result, Volume, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
    Bilateral,
}

impl Laterality {
    pub fn as_str(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
            Laterality::Bilateral => "bilateral",
        }
    }

    /// Merge two sides; left with right gives bilateral.
    pub fn merge(self, other: Laterality) -> Laterality {
        if self == other {
            self
        } else {
            Laterality::Bilateral
        }
    }
}

impl std::str::FromStr for Laterality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "left" => Ok(Laterality::Left),
            "right" => Ok(Laterality::Right),
            "bilateral" => Ok(Laterality::Bilateral),
            other => Err(format!("unknown laterality '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laterality: Option<Laterality>,
}

/// One scan with its structure masks: the unit of pipeline input.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyBundle {
    pub study_id: String,
    pub volume: Volume,
    pub masks: BTreeMap<String, Mask>,
    pub ground_truth: Option<BTreeMap<String, GroundTruth>>,
}

impl StudyBundle {
    pub fn new(
        study_id: impl Into<String>,
        volume: Volume,
        masks: impl IntoIterator<Item = Mask>,
        ground_truth: Option<BTreeMap<String, GroundTruth>>,
    ) -> Result<Self> {
        let study_id = study_id.into();
        if study_id.is_empty() {
            return Err(VolumeError::InvalidStudy(
                "study_id must be non-empty".into(),
            ));
        }
        let mut map = BTreeMap::new();
        for m in masks {
            if !m.same_grid(volume.dims(), volume.spacing()) {
                return Err(VolumeError::GeometryMismatch {
                    structure: m.structure_id().to_string(),
                });
            }
            map.insert(m.structure_id().to_string(), m);
        }
        Ok(Self {
            study_id,
            volume,
            masks: map,
            ground_truth,
        })
    }

    pub fn mask(&self, structure_id: &str) -> Option<&Mask> {
        self.masks.get(structure_id)
    }
}

/// Contents of `study.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyManifest {
    pub study_id: String,
    pub structures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<BTreeMap<String, GroundTruth>>,
}

/// Write a study directory: `volume.mvol`, `masks/<id>.mmsk`, `study.json`.
pub fn save_study(study: &StudyBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("masks"))?;
    save_volume(
        &study.volume,
        BufWriter::new(File::create(dir.join("volume.mvol"))?),
    )?;
    for (id, mask) in &study.masks {
        let path = dir.join("masks").join(format!("{id}.mmsk"));
        save_mask(mask, BufWriter::new(File::create(path)?))?;
    }
    let manifest = StudyManifest {
        study_id: study.study_id.clone(),
        structures: study.masks.keys().cloned().collect(),
        ground_truth: study.ground_truth.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("study.json"), json)?;
    Ok(())
}

pub fn load_study(dir: &Path) -> Result<StudyBundle> {
    let manifest: StudyManifest = serde_json::from_slice(&fs::read(dir.join("study.json"))?)?;
    let volume = load_volume(BufReader::new(File::open(dir.join("volume.mvol"))?))?;
    let mut masks = Vec::with_capacity(manifest.structures.len());
    for id in &manifest.structures {
        let path = dir.join("masks").join(format!("{id}.mmsk"));
        masks.push(load_mask(BufReader::new(File::open(path)?), id)?);
    }
    StudyBundle::new(manifest.study_id, volume, masks, manifest.ground_truth)
}
