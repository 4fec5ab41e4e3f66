//! Pathology-specific volumetric descriptors.
//!
//! Each tool binds one pathology to a set of structure masks and an ordered
//! feature list. Features that cannot be computed (missing or empty masks,
//! zero reference volume, empty HU sample) are reported as `0.0` with an
//! undefined flag instead of an error, so every tool output is a complete
//! query vector.

mod features;
mod registry;
mod tool;

pub use features::{
    absolute_volume, axial_extent, hu_statistics, laterality_fractions, nearest_rank,
    orientation_fractions, relative_volume, thickness, HuStats,
};
pub use registry::{
    FeatureKind, FeatureRef, RegistryError, ToolRegistry, ToolSpec, DEFAULT_REGISTRY_JSON,
};
pub use tool::{
    estimate_midplanes, resolve_structure, run_tool, FeatureVector, FeatureVectorError, Midplanes,
};

/// Percentiles reported by the `hu_p*` features.
pub const HU_PERCENTILES: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

/// Default HU window for calcification-type tools.
pub const CALCIUM_WINDOW: (i16, i16) = (130, 3071);
