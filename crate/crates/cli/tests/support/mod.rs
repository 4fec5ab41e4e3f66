#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctevidence_core::llm::{ChatBackend, ChatRequest, ChatResponse, LlmError, Usage};
use ctevidence_core::radiomics::{estimate_midplanes, run_tool, FeatureVector, ToolRegistry};
use ctevidence_core::retrieval::{Index, ReferenceEntry};
use ctevidence_core::snippets::canonical_negative;
use ctevidence_core::volume::{
    make_phantom, EllipsoidSpec, Laterality, LesionSpec, PhantomSpec, StudyBundle,
};

pub const LEFT: &str = "Left pleural effusion is observed.";
pub const RIGHT: &str = "Right pleural effusion is observed.";
pub const PERICARDIAL: &str = "Pericardial effusion is present.";
pub const CALCIFIED: &str = "Calcified plaque is seen in the aortic wall.";

#[derive(Debug, Clone, Copy, Default)]
pub struct Findings {
    pub effusion: Option<Laterality>,
    pub pericardial: bool,
    pub calcified: bool,
}

fn organ(id: &str, c: [f64; 3], a: [f64; 3], hu: f64) -> EllipsoidSpec {
    EllipsoidSpec {
        structure_id: id.into(),
        center_mm: c,
        semi_axes_mm: a,
        hu_value: hu,
    }
}

fn lesion(
    pathology: &str,
    structure: &str,
    c: [f64; 3],
    a: [f64; 3],
    hu: f64,
    side: Option<Laterality>,
) -> LesionSpec {
    LesionSpec {
        pathology_id: pathology.into(),
        structure_id: structure.into(),
        center_mm: c,
        semi_axes_mm: a,
        hu_value: hu,
        intended_laterality: side,
    }
}

/// 32x32x24 grid at 4 mm with two lungs, heart and aorta; +x is patient left.
pub fn chest_spec(study_id: &str, f: Findings) -> PhantomSpec {
    let mut lesions = Vec::new();
    let pleural = |x: f64, side| {
        lesion(
            "PleuralEffusion",
            "pleural_effusion_region",
            [x, 88.0, 40.0],
            [12.0, 10.0, 16.0],
            12.0,
            Some(side),
        )
    };
    match f.effusion {
        Some(Laterality::Left) => lesions.push(pleural(92.0, Laterality::Left)),
        Some(Laterality::Right) => lesions.push(pleural(36.0, Laterality::Right)),
        Some(Laterality::Bilateral) => {
            lesions.push(pleural(92.0, Laterality::Left));
            lesions.push(pleural(36.0, Laterality::Right));
        }
        None => {}
    }
    if f.pericardial {
        lesions.push(lesion(
            "PericardialEffusion",
            "pericardial_effusion_region",
            [64.0, 48.0, 36.0],
            [18.0, 18.0, 18.0],
            10.0,
            None,
        ));
    }
    if f.calcified {
        lesions.push(lesion(
            "ArterialWallCalcification",
            "aortic_calcification",
            [60.0, 76.0, 48.0],
            [4.0, 4.0, 12.0],
            600.0,
            None,
        ));
    }
    PhantomSpec {
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
    }
}

pub fn chest(study_id: &str, f: Findings) -> StudyBundle {
    make_phantom(&chest_spec(study_id, f)).unwrap()
}

pub fn features(study: &StudyBundle, registry: &ToolRegistry, pathology: &str) -> FeatureVector {
    let tool = registry.tool(pathology).unwrap();
    run_tool(study, tool, &registry.schema_id, estimate_midplanes(study))
}

/// Reference partitions whose nearest snippet encodes the planted finding
/// for pleural effusion, pericardial effusion and aortic calcification.
/// Every other tool gets canonical negatives.
pub fn reference_index(registry: &ToolRegistry) -> Index {
    let f = |effusion, planted| Findings {
        effusion,
        pericardial: planted,
        calcified: planted,
    };
    let refs = [
        chest("ref-left", f(Some(Laterality::Left), true)),
        chest("ref-right", f(Some(Laterality::Right), false)),
        chest("ref-none", f(None, false)),
    ];
    let mut entries = Vec::new();
    for tool in &registry.tools {
        let negative = canonical_negative(&tool.display_name);
        for (i, study) in refs.iter().enumerate() {
            let snippet = match (tool.pathology_id.as_str(), i) {
                ("PleuralEffusion", 0) => LEFT.to_string(),
                ("PleuralEffusion", 1) => RIGHT.to_string(),
                ("PericardialEffusion", 0) => PERICARDIAL.to_string(),
                ("ArterialWallCalcification", 0) => CALCIFIED.to_string(),
                _ => negative.clone(),
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

/// Decides on the first unvisited tool and writes the report as the nearest
/// snippet of every evidence item.
pub struct EchoBackend;

impl ChatBackend for EchoBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let last = &request.messages().last().unwrap().content;
        let content = if last.ends_with("Report:") {
            last.lines()
                .filter_map(|l| l.trim_start().strip_prefix("1. [distance "))
                .filter_map(|l| l.split_once("] ").map(|(_, s)| s))
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            let list = last
                .lines()
                .find_map(|l| l.strip_prefix("Unvisited tools: "))
                .unwrap_or("(none)");
            match list.split(", ").next() {
                Some("(none)") | None => r#"{"action": "STOP"}"#.to_string(),
                Some(first) => format!(r#"{{"action": "{first}", "rationale": "next tool"}}"#),
            }
        };
        Ok(ChatResponse {
            usage: Usage::new(0, 0),
            content,
            latency_ms: 0.0,
        })
    }

    fn kind(&self) -> &'static str {
        "echo"
    }
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_ctevidence"))
}

pub fn ctevidence(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write_index(index: &Index, path: &Path) {
    let mut buf = Vec::new();
    index.save(&mut buf).unwrap();
    std::fs::write(path, buf).unwrap();
}

/// Fixture JSONL: `garbage` unparseable decision replies then one report.
pub fn fallback_fixture(path: &Path, garbage: usize, report: &str) {
    let mut text = String::new();
    for i in 0..garbage {
        text.push_str(
            &serde_json::json!({"match": "*", "response": format!("I cannot decide ({i}).")})
                .to_string(),
        );
        text.push('\n');
    }
    text.push_str(&serde_json::json!({"match": "*", "response": report}).to_string());
    text.push('\n');
    std::fs::write(path, text).unwrap();
}
