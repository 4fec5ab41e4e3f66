//! Synthetic ellipsoid phantoms with analytic ground truth.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    voxel_center, GroundTruth, Laterality, Mask, Result, StudyBundle, Volume, VolumeError, HU_MAX,
    HU_MIN,
};
use crate::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub structure_id: String,
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub hu_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub pathology_id: String,
    pub structure_id: String,
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub hu_value: f64,
    #[serde(default)]
    pub intended_laterality: Option<Laterality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default = "default_study_id")]
    pub study_id: String,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub organs: Vec<EllipsoidSpec>,
    #[serde(default)]
    pub lesions: Vec<LesionSpec>,
    pub background_hu: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Amplitude of uniform integer HU noise added after rendering; 0 disables.
    #[serde(default)]
    pub noise_hu: u16,
}

fn default_study_id() -> String {
    "phantom".to_string()
}

struct Shape<'a> {
    name: &'a str,
    center: [f64; 3],
    axes: [f64; 3],
    hu: i16,
}

impl Shape<'_> {
    #[allow(clippy::needless_range_loop)]
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for d in 0..3 {
            let t = (p[d] - self.center[d]) / self.axes[d];
            acc += t * t;
        }
        acc <= 1.0
    }

    /// Inclusive voxel index range possibly touched along axis `d`.
    fn index_range(&self, d: usize, n: usize, s: f64) -> (usize, usize) {
        let lo = ((self.center[d] - self.axes[d]) / s - 0.5).floor().max(0.0) as usize;
        let hi = ((self.center[d] + self.axes[d]) / s - 0.5).ceil().max(0.0) as usize;
        (lo.min(n - 1), hi.min(n - 1))
    }
}

fn clamp_hu(v: f64) -> i16 {
    v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16
}

/// Voxelize `shapes` into slab `z`, calling `hit` for every contained voxel
/// with its in-slab offset.
fn rasterize_slice(
    shapes: &[&Shape<'_>],
    z: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    mut hit: impl FnMut(&Shape<'_>, usize),
) {
    let pz = voxel_center(z, spacing[2]);
    for shape in shapes {
        let (z0, z1) = shape.index_range(2, dims[2], spacing[2]);
        if z < z0 || z > z1 {
            continue;
        }
        let (y0, y1) = shape.index_range(1, dims[1], spacing[1]);
        let (x0, x1) = shape.index_range(0, dims[0], spacing[0]);
        for y in y0..=y1 {
            let py = voxel_center(y, spacing[1]);
            for x in x0..=x1 {
                if shape.contains([voxel_center(x, spacing[0]), py, pz]) {
                    hit(shape, x + dims[0] * y);
                }
            }
        }
    }
}

/// Render a phantom study. Later organs and lesions overwrite earlier HU
/// values; every ellipsoid contributes to the mask named by its structure id.
pub fn make_phantom(spec: &PhantomSpec) -> Result<StudyBundle> {
    make_phantom_with(spec, Execution::default())
}

pub fn make_phantom_with(spec: &PhantomSpec, exec: Execution) -> Result<StudyBundle> {
    let dims = spec.dims;
    let spacing = spec.spacing_mm;
    if dims.contains(&0) {
        return Err(VolumeError::ZeroDimension(dims));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(VolumeError::NonPositiveSpacing(spacing));
    }

    let shapes: Vec<Shape<'_>> = spec
        .organs
        .iter()
        .map(|o| Shape {
            name: &o.structure_id,
            center: o.center_mm,
            axes: o.semi_axes_mm,
            hu: clamp_hu(o.hu_value),
        })
        .chain(spec.lesions.iter().map(|l| Shape {
            name: &l.structure_id,
            center: l.center_mm,
            axes: l.semi_axes_mm,
            hu: clamp_hu(l.hu_value),
        }))
        .collect();

    for s in &shapes {
        if s.name.is_empty() {
            return Err(VolumeError::InvalidSpec("empty structure_id".into()));
        }
        for d in 0..3 {
            if s.axes[d].is_nan() || s.axes[d] <= 0.0 {
                return Err(VolumeError::InvalidSpec(format!(
                    "'{}' has a non-positive semi-axis",
                    s.name
                )));
            }
            let extent = dims[d] as f64 * spacing[d];
            if s.center[d] - s.axes[d] < 0.0 || s.center[d] + s.axes[d] > extent {
                return Err(VolumeError::OutOfBounds {
                    name: s.name.to_string(),
                });
            }
        }
    }

    let slab = dims[0] * dims[1];
    let all: Vec<&Shape<'_>> = shapes.iter().collect();
    let mut hu = vec![clamp_hu(spec.background_hu); slab * dims[2]];
    exec.for_each_chunk_mut(&mut hu, slab, |z, out| {
        rasterize_slice(&all, z, dims, spacing, |shape, i| out[i] = shape.hu);
    });

    if spec.noise_hu > 0 {
        let amp = spec.noise_hu as i32;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        for v in hu.iter_mut() {
            let n: i32 = rng.gen_range(-amp..=amp);
            *v = (*v as i32 + n).clamp(HU_MIN as i32, HU_MAX as i32) as i16;
        }
    }

    let mut structures: Vec<&str> = shapes.iter().map(|s| s.name).collect();
    structures.sort_unstable();
    structures.dedup();
    let mut masks = Vec::with_capacity(structures.len());
    for name in structures {
        let members: Vec<&Shape<'_>> = shapes.iter().filter(|s| s.name == name).collect();
        let mut bits = vec![0u8; slab * dims[2]];
        exec.for_each_chunk_mut(&mut bits, slab, |z, out| {
            rasterize_slice(&members, z, dims, spacing, |_, i| out[i] = 1);
        });
        masks.push(Mask::new(name, dims, spacing, bits)?);
    }

    let ground_truth = if spec.lesions.is_empty() {
        None
    } else {
        let mut gt: BTreeMap<String, GroundTruth> = BTreeMap::new();
        for l in &spec.lesions {
            let entry = gt.entry(l.pathology_id.clone()).or_insert(GroundTruth {
                present: true,
                laterality: None,
            });
            entry.laterality = match (entry.laterality, l.intended_laterality) {
                (Some(a), Some(b)) => Some(a.merge(b)),
                (a, b) => a.or(b),
            };
        }
        Some(gt)
    };

    let volume = Volume::new(dims, spacing, hu)?;
    StudyBundle::new(spec.study_id.clone(), volume, masks, ground_truth)
}
