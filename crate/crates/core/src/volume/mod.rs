//! CT volumes, binary structure masks and their on-disk containers.
//!
//! Grids are stored row-major with x fastest, then y, then z. Geometry uses
//! the voxel-center convention: voxel `i` along an axis with spacing `s` sits
//! at `(i + 0.5) * s` millimetres. The patient frame is fixed: +x toward the
//! patient's left, +y toward posterior, +z toward the head.

mod format;
mod phantom;
mod study;

pub use format::{load_mask, load_volume, save_mask, save_volume, HEADER_LEN};
pub use phantom::{make_phantom, make_phantom_with, EllipsoidSpec, LesionSpec, PhantomSpec};
pub use study::{load_study, save_study, GroundTruth, Laterality, StudyBundle, StudyManifest};

use thiserror::Error;

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected payload code {found}, expected {expected}")]
    PayloadCode { found: u32, expected: u32 },
    #[error("payload length {actual} does not match expected {expected} bytes")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("spacing must be strictly positive and finite, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("dimensions must be positive, got {0:?}")]
    ZeroDimension([usize; 3]),
    #[error("voxel count {actual} does not match dims {dims:?}")]
    VoxelCount { dims: [usize; 3], actual: usize },
    #[error("HU value {value} at voxel {index} outside [-1024, 3071]")]
    HuOutOfRange { index: usize, value: i16 },
    #[error("invalid mask value {value} at voxel {index}")]
    InvalidMaskValue { index: usize, value: u8 },
    #[error("mask '{structure}' geometry does not match the volume")]
    GeometryMismatch { structure: String },
    #[error("ellipsoid '{name}' exceeds the grid bounds")]
    OutOfBounds { name: String },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid study: {0}")]
    InvalidStudy(String),
    #[error("study manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(VolumeError::ZeroDimension(dims));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(VolumeError::NonPositiveSpacing(spacing));
    }
    if dims[0] * dims[1] * dims[2] != len {
        return Err(VolumeError::VoxelCount { dims, actual: len });
    }
    Ok(())
}

/// A CT volume in Hounsfield Units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<i16>) -> Result<Self> {
        check_geometry(dims, spacing, voxels.len())?;
        if let Some((index, &value)) = voxels
            .iter()
            .enumerate()
            .find(|(_, &v)| !(HU_MIN..=HU_MAX).contains(&v))
        {
            return Err(VolumeError::HuOutOfRange { index, value });
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    /// A volume filled with one HU value (clamped to the valid range).
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], hu: i16) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![hu.clamp(HU_MIN, HU_MAX); n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[linear_index(self.dims, x, y, z)]
    }
}

/// A binary mask for one anatomical structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    structure_id: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<u8>,
}

impl Mask {
    pub fn new(
        structure_id: impl Into<String>,
        dims: [usize; 3],
        spacing: [f64; 3],
        voxels: Vec<u8>,
    ) -> Result<Self> {
        check_geometry(dims, spacing, voxels.len())?;
        if let Some((index, &value)) = voxels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(VolumeError::InvalidMaskValue { index, value });
        }
        Ok(Self {
            structure_id: structure_id.into(),
            dims,
            spacing,
            voxels,
        })
    }

    pub fn empty(
        structure_id: impl Into<String>,
        dims: [usize; 3],
        spacing: [f64; 3],
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(structure_id, dims, spacing, vec![0; n])
    }

    pub fn structure_id(&self) -> &str {
        &self.structure_id
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[linear_index(self.dims, x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.voxels[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.contains(&1)
    }

    /// Same grid geometry as `other` (dims exactly, spacing bitwise).
    pub fn same_grid(&self, dims: [usize; 3], spacing: [f64; 3]) -> bool {
        self.dims == dims && self.spacing == spacing
    }

    pub fn with_structure_id(mut self, structure_id: impl Into<String>) -> Self {
        self.structure_id = structure_id.into();
        self
    }

    /// Voxel-wise union with another mask on the same grid.
    pub fn union(&self, other: &Mask, structure_id: impl Into<String>) -> Result<Mask> {
        if !other.same_grid(self.dims, self.spacing) {
            return Err(VolumeError::GeometryMismatch {
                structure: other.structure_id.clone(),
            });
        }
        let voxels = self
            .voxels
            .iter()
            .zip(&other.voxels)
            .map(|(a, b)| a | b)
            .collect();
        Ok(Mask {
            structure_id: structure_id.into(),
            dims: self.dims,
            spacing: self.spacing,
            voxels,
        })
    }

    /// Iterate `(x, y, z)` of all set voxels in storage order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let [nx, ny, _] = self.dims;
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(move |(i, _)| (i % nx, (i / nx) % ny, i / (nx * ny)))
    }
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Center coordinate in millimetres of voxel index `i` along an axis.
#[inline]
pub fn voxel_center(i: usize, spacing: f64) -> f64 {
    (i as f64 + 0.5) * spacing
}
