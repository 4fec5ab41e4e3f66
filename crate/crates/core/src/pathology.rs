//! The 18 target pathologies and their display names.
//!
//! Identifiers are the action names the agent emits; display names are used in
//! canonical negative sentences and prompts.

pub const PATHOLOGY_COUNT: usize = 18;

/// `(identifier, display name)` in the canonical column order.
pub const PATHOLOGIES: [(&str, &str); PATHOLOGY_COUNT] = [
    ("MedicalMaterial", "Medical material"),
    ("ArterialWallCalcification", "Arterial wall calcification"),
    ("Cardiomegaly", "Cardiomegaly"),
    ("PericardialEffusion", "Pericardial effusion"),
    (
        "CoronaryArteryWallCalcification",
        "Coronary artery wall calcification",
    ),
    ("HiatalHernia", "Hiatal hernia"),
    ("Lymphadenopathy", "Lymphadenopathy"),
    ("Emphysema", "Emphysema"),
    ("Atelectasis", "Atelectasis"),
    ("LungNodule", "Lung nodule"),
    ("LungOpacity", "Lung opacity"),
    ("PulmonaryFibroticSequela", "Pulmonary fibrotic sequela"),
    ("PleuralEffusion", "Pleural effusion"),
    ("MosaicAttenuationPattern", "Mosaic attenuation pattern"),
    ("PeribronchialThickening", "Peribronchial thickening"),
    ("Consolidation", "Consolidation"),
    ("Bronchiectasis", "Bronchiectasis"),
    (
        "InterlobularSeptalThickening",
        "Interlobular septal thickening",
    ),
];

/// The ten pathologies whose evidence comes from the lung masks.
pub const LUNG_PATHOLOGIES: [&str; 10] = [
    "Emphysema",
    "Atelectasis",
    "Consolidation",
    "LungOpacity",
    "LungNodule",
    "PulmonaryFibroticSequela",
    "MosaicAttenuationPattern",
    "PeribronchialThickening",
    "Bronchiectasis",
    "InterlobularSeptalThickening",
];

pub fn index_of(id: &str) -> Option<usize> {
    PATHOLOGIES.iter().position(|(p, _)| *p == id)
}

pub fn display_name(id: &str) -> Option<&'static str> {
    PATHOLOGIES.iter().find(|(p, _)| *p == id).map(|(_, d)| *d)
}

pub fn ids() -> impl Iterator<Item = &'static str> {
    PATHOLOGIES.iter().map(|(p, _)| *p)
}
