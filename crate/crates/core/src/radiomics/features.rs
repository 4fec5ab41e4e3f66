use crate::volume::{voxel_center, Mask, Volume};

/// Count of set voxels times the voxel volume, in mm³.
pub fn absolute_volume(mask: &Mask) -> f64 {
    let [sx, sy, sz] = mask.spacing();
    mask.count() as f64 * sx * sy * sz
}

/// `target / reference` volume ratio; `None` when the reference is empty.
pub fn relative_volume(target: &Mask, reference: &Mask) -> Option<f64> {
    let r = absolute_volume(reference);
    if r == 0.0 {
        None
    } else {
        Some(absolute_volume(target) / r)
    }
}

/// Craniocaudal extent in mm over the slices that contain the mask.
pub fn axial_extent(mask: &Mask) -> f64 {
    let [nx, ny, nz] = mask.dims();
    let slab = nx * ny;
    let occupied = |z: usize| mask.voxels()[z * slab..(z + 1) * slab].contains(&1);
    let Some(z_min) = (0..nz).find(|&z| occupied(z)) else {
        return 0.0;
    };
    let z_max = (0..nz).rev().find(|&z| occupied(z)).unwrap_or(z_min);
    (z_max - z_min + 1) as f64 * mask.spacing()[2]
}

/// 95th percentile (nearest rank) of the longest anteroposterior run of
/// mask voxels in every (slice, x-column) that contains the mask, in mm.
pub fn thickness(mask: &Mask) -> f64 {
    let [nx, ny, nz] = mask.dims();
    let sy = mask.spacing()[1];
    let mut runs = Vec::new();
    for z in 0..nz {
        for x in 0..nx {
            let mut best = 0usize;
            let mut cur = 0usize;
            for y in 0..ny {
                if mask.get(x, y, z) {
                    cur += 1;
                    best = best.max(cur);
                } else {
                    cur = 0;
                }
            }
            if best > 0 {
                runs.push(best);
            }
        }
    }
    if runs.is_empty() {
        return 0.0;
    }
    runs.sort_unstable();
    *nearest_rank(&runs, 95.0) as f64 * sy
}

fn split_fractions(mask: &Mask, axis: usize, plane_mm: f64) -> Option<(f64, f64)> {
    let s = mask.spacing()[axis];
    let (mut low_or_on, mut high) = (0usize, 0usize);
    for (x, y, z) in mask.iter_set() {
        let idx = [x, y, z][axis];
        if voxel_center(idx, s) > plane_mm {
            high += 1;
        } else {
            low_or_on += 1;
        }
    }
    let n = low_or_on + high;
    if n == 0 {
        None
    } else {
        Some((low_or_on as f64 / n as f64, high as f64 / n as f64))
    }
}

/// `(left, right)` voxel fractions about the sagittal plane at `midline_x_mm`.
/// +x is patient left; voxels centred exactly on the plane count as left.
pub fn laterality_fractions(mask: &Mask, midline_x_mm: f64) -> Option<(f64, f64)> {
    let s = mask.spacing()[0];
    let (mut left, mut right) = (0usize, 0usize);
    for (x, _, _) in mask.iter_set() {
        if voxel_center(x, s) >= midline_x_mm {
            left += 1;
        } else {
            right += 1;
        }
    }
    let n = left + right;
    if n == 0 {
        None
    } else {
        Some((left as f64 / n as f64, right as f64 / n as f64))
    }
}

/// `(anterior, posterior)` voxel fractions about the coronal plane at
/// `midcoronal_y_mm`. +y is posterior; on-plane voxels count as anterior.
pub fn orientation_fractions(mask: &Mask, midcoronal_y_mm: f64) -> Option<(f64, f64)> {
    split_fractions(mask, 1, midcoronal_y_mm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HuStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `(q, value)` in the requested order.
    pub percentiles: Vec<(f64, f64)>,
}

impl HuStats {
    pub fn percentile(&self, q: f64) -> Option<f64> {
        self.percentiles
            .iter()
            .find(|(p, _)| *p == q)
            .map(|(_, v)| *v)
    }
}

/// Nearest-rank percentile of an ascending sample: the element at 1-based
/// index `ceil(q/100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank<T>(sorted: &[T], q: f64) -> &T {
    let n = sorted.len();
    assert!(n > 0, "nearest_rank on an empty sample");
    let rank = (q * n as f64 / 100.0).ceil() as usize;
    &sorted[rank.clamp(1, n) - 1]
}

/// HU statistics over the mask voxels, optionally restricted to an inclusive
/// HU window. `None` when the sample is empty.
pub fn hu_statistics(
    volume: &Volume,
    mask: &Mask,
    percentiles: &[f64],
    window: Option<(i16, i16)>,
) -> Option<HuStats> {
    assert!(
        mask.same_grid(volume.dims(), volume.spacing()),
        "mask '{}' does not share the volume grid",
        mask.structure_id()
    );
    let mut sample: Vec<i16> = volume
        .voxels()
        .iter()
        .zip(mask.voxels())
        .filter(|(_, &m)| m == 1)
        .map(|(&v, _)| v)
        .filter(|v| window.is_none_or(|(lo, hi)| (lo..=hi).contains(v)))
        .collect();
    if sample.is_empty() {
        return None;
    }
    sample.sort_unstable();
    let sum: i64 = sample.iter().map(|&v| v as i64).sum();
    Some(HuStats {
        count: sample.len(),
        mean: sum as f64 / sample.len() as f64,
        min: sample[0] as f64,
        max: sample[sample.len() - 1] as f64,
        percentiles: percentiles
            .iter()
            .map(|&q| (q, *nearest_rank(&sample, q) as f64))
            .collect(),
    })
}
