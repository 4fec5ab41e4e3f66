#![allow(dead_code)]

use ctevidence_core::radiomics::{estimate_midplanes, run_tool, FeatureVector, ToolRegistry};
use ctevidence_core::retrieval::{Index, ReferenceEntry};
use ctevidence_core::volume::{
    make_phantom, EllipsoidSpec, Laterality, LesionSpec, PhantomSpec, StudyBundle,
};

pub const LEFT: &str = "Left pleural effusion is observed.";
pub const RIGHT: &str = "Right pleural effusion is observed.";
pub const NO_EFFUSION: &str = "No sign of Pleural effusion was found in the scan.";

fn organ(id: &str, c: [f64; 3], a: [f64; 3], hu: f64) -> EllipsoidSpec {
    EllipsoidSpec {
        structure_id: id.into(),
        center_mm: c,
        semi_axes_mm: a,
        hu_value: hu,
    }
}

/// 32x32x24 grid at 4 mm: two lungs, heart, aorta and an optional pleural
/// effusion on the given side (+x is patient left).
pub fn chest(study_id: &str, effusion: Option<Laterality>) -> StudyBundle {
    let mut lesions = Vec::new();
    let mut add = |x: f64, lat| {
        lesions.push(LesionSpec {
            pathology_id: "PleuralEffusion".into(),
            structure_id: "pleural_effusion_region".into(),
            center_mm: [x, 88.0, 40.0],
            semi_axes_mm: [12.0, 10.0, 16.0],
            hu_value: 12.0,
            intended_laterality: Some(lat),
        })
    };
    match effusion {
        Some(Laterality::Left) => add(92.0, Laterality::Left),
        Some(Laterality::Right) => add(36.0, Laterality::Right),
        Some(Laterality::Bilateral) => {
            add(92.0, Laterality::Left);
            add(36.0, Laterality::Right);
        }
        None => {}
    }
    let spec = PhantomSpec {
        study_id: study_id.into(),
        dims: [32, 32, 24],
        spacing_mm: [4.0, 4.0, 4.0],
        organs: vec![
            organ("lung_right", [36.0, 64.0, 48.0], [22.0, 36.0, 40.0], -850.0),
            organ("lung_left", [92.0, 64.0, 48.0], [22.0, 36.0, 40.0], -850.0),
            organ("heart", [64.0, 48.0, 36.0], [14.0, 14.0, 14.0], 40.0),
            organ("aorta", [60.0, 76.0, 48.0], [6.0, 6.0, 32.0], 45.0),
        ],
        lesions,
        background_hu: -1000.0,
        rng_seed: 7,
        noise_hu: 0,
    };
    make_phantom(&spec).unwrap()
}

pub fn features(study: &StudyBundle, registry: &ToolRegistry, pathology: &str) -> FeatureVector {
    let tool = registry.tool(pathology).unwrap();
    run_tool(study, tool, &registry.schema_id, estimate_midplanes(study))
}

/// Every tool gets a partition built from three reference phantoms. The
/// pleural effusion snippets encode the planted side.
pub fn reference_index(registry: &ToolRegistry) -> Index {
    let refs = [
        (chest("ref-left", Some(Laterality::Left)), LEFT),
        (chest("ref-right", Some(Laterality::Right)), RIGHT),
        (chest("ref-none", None), NO_EFFUSION),
    ];
    let mut entries = Vec::new();
    for tool in &registry.tools {
        for (study, effusion_snippet) in &refs {
            let snippet = if tool.pathology_id == "PleuralEffusion" {
                effusion_snippet.to_string()
            } else {
                format!("No sign of {} was found in the scan.", tool.display_name)
            };
            entries.push(ReferenceEntry {
                entry_id: entries.len() as u64,
                pathology_id: tool.pathology_id.clone(),
                features: features(study, registry, &tool.pathology_id),
                snippet,
                source_id: study.study_id.clone(),
            });
        }
    }
    Index::build(entries).unwrap()
}
