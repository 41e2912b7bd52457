//! Reproducibility evaluation: bundle voxelization, volumetric Dice,
//! adjacency distance, volume, and streamline-overlap measures, plus the
//! run-rerun / scan-rescan comparison report.

use nalgebra::{Matrix4, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::BundleResult;
use crate::streamline::Streamline;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("masks live on different grids")]
    GridMismatch,
    #[error("adjacency requires non-empty masks")]
    EmptyMask,
    #[error("results reference different tractograms ('{a}' vs '{b}')")]
    ProvenanceMismatch { a: String, b: String },
    #[error("run-rerun comparison requires streamline ID sets on both sides")]
    MissingIds,
}

/// A regular voxel grid: isotropic voxel size, grid-to-world affine
/// (voxel index maps to the voxel center), and dimensions.
#[derive(Clone, Debug)]
pub struct GridSpec {
    voxel_size: f64,
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
    dims: [usize; 3],
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.voxel_size == other.voxel_size
            && self.affine == other.affine
            && self.dims == other.dims
    }
}

impl GridSpec {
    pub fn new(
        voxel_size: f64,
        affine: Matrix4<f64>,
        dims: [usize; 3],
    ) -> Result<Self, MetricsError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(MetricsError::InvalidGrid(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if dims.contains(&0) {
            return Err(MetricsError::InvalidGrid(format!(
                "dimensions must be positive, got {dims:?}"
            )));
        }
        let inverse = affine
            .try_inverse()
            .ok_or_else(|| MetricsError::InvalidGrid("affine is not invertible".into()))?;
        Ok(Self {
            voxel_size,
            affine,
            inverse,
            dims,
        })
    }

    /// Axis-aligned grid with the given world origin at voxel (0,0,0).
    pub fn axis_aligned(origin: Point3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        let mut affine = Matrix4::identity() * voxel_size;
        affine[(3, 3)] = 1.0;
        affine.fixed_view_mut::<3, 1>(0, 3).copy_from(&origin.coords);
        Self::new(voxel_size, affine, dims).expect("axis-aligned grid is always valid")
    }

    /// Axis-aligned grid fit to a world bounding box, padded by
    /// `pad_voxels` on every side.
    pub fn fit(
        lo: Point3<f64>,
        hi: Point3<f64>,
        voxel_size: f64,
        pad_voxels: usize,
    ) -> Result<Self, MetricsError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(MetricsError::InvalidGrid(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        let pad = pad_voxels as f64;
        let mut dims = [0usize; 3];
        let mut origin = Point3::origin();
        for axis in 0..3 {
            let start = (lo[axis] / voxel_size).floor() - pad;
            let end = (hi[axis] / voxel_size).ceil() + pad;
            origin[axis] = start * voxel_size;
            dims[axis] = (end - start) as usize + 1;
        }
        Ok(Self::axis_aligned(origin, voxel_size, dims))
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    /// World coordinates of a voxel center.
    pub fn voxel_center(&self, ijk: [usize; 3]) -> Point3<f64> {
        self.affine
            .transform_point(&Point3::new(ijk[0] as f64, ijk[1] as f64, ijk[2] as f64))
    }

    fn world_to_index(&self, p: &Point3<f64>) -> [i64; 3] {
        let g = self.inverse.transform_point(p);
        [
            g.x.round() as i64,
            g.y.round() as i64,
            g.z.round() as i64,
        ]
    }

    fn linear(&self, ijk: [usize; 3]) -> usize {
        (ijk[2] * self.dims[1] + ijk[1]) * self.dims[0] + ijk[0]
    }
}

/// Binary occupancy grid over a `GridSpec`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMask {
    grid: GridSpec,
    occupancy: Vec<bool>,
}

impl VoxelMask {
    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.dims[0] * grid.dims[1] * grid.dims[2];
        Self {
            grid,
            occupancy: vec![false; n],
        }
    }

    pub fn from_indices(grid: GridSpec, indices: &[[usize; 3]]) -> Self {
        let mut mask = Self::empty(grid);
        for &ijk in indices {
            let lin = mask.grid.linear(ijk);
            mask.occupancy[lin] = true;
        }
        mask
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Number of occupied voxels.
    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn is_occupied(&self, ijk: [usize; 3]) -> bool {
        self.occupancy[self.grid.linear(ijk)]
    }

    /// Occupied voxel indices in x-fastest scan order.
    pub fn occupied_indices(&self) -> Vec<[usize; 3]> {
        let [nx, ny, _] = self.grid.dims;
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(lin, _)| {
                let x = lin % nx;
                let y = (lin / nx) % ny;
                let z = lin / (nx * ny);
                [x, y, z]
            })
            .collect()
    }
}

/// Rasterizes streamlines into a binary mask: a voxel is occupied iff a
/// polyline passes through it. Segments are sampled at steps of at most
/// half a voxel so no crossed voxel is skipped. Points falling outside
/// `grid` expand it by whole voxels (alignment preserved).
pub fn voxelize(streamlines: &[Streamline], grid: &GridSpec) -> VoxelMask {
    let mut samples: Vec<[i64; 3]> = Vec::new();
    let max_step = grid.voxel_size / 2.0;
    for s in streamlines {
        let pts = s.points();
        samples.push(grid.world_to_index(&pts[0]));
        for w in pts.windows(2) {
            let seg = w[1] - w[0];
            let n = (seg.norm() / max_step).ceil().max(1.0) as usize;
            for k in 1..=n {
                let p = w[0] + seg * (k as f64 / n as f64);
                samples.push(grid.world_to_index(&p));
            }
        }
    }
    if samples.is_empty() {
        return VoxelMask::empty(grid.clone());
    }

    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for s in &samples {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(s[axis]);
            hi[axis] = hi[axis].max(s[axis]);
        }
    }
    let inside = (0..3).all(|a| lo[a] >= 0 && hi[a] < grid.dims[a] as i64);
    let (grid, shift) = if inside {
        (grid.clone(), [0i64; 3])
    } else {
        // Expand by whole voxels: new index = old index - shift.
        let mut shift = [0i64; 3];
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            shift[axis] = lo[axis].min(0);
            dims[axis] = (hi[axis].max(grid.dims[axis] as i64 - 1) - shift[axis]) as usize + 1;
        }
        let translate = Matrix4::new_translation(&Vector3::new(
            shift[0] as f64,
            shift[1] as f64,
            shift[2] as f64,
        ));
        let affine = grid.affine * translate;
        (
            GridSpec::new(grid.voxel_size, affine, dims).expect("expanded grid stays valid"),
            shift,
        )
    };

    let mut mask = VoxelMask::empty(grid);
    for s in samples {
        let ijk = [
            (s[0] - shift[0]) as usize,
            (s[1] - shift[1]) as usize,
            (s[2] - shift[2]) as usize,
        ];
        let lin = mask.grid.linear(ijk);
        mask.occupancy[lin] = true;
    }
    mask
}

/// Volumetric Dice coefficient `2|A∩B| / (|A|+|B|)`. Two empty masks
/// count as a perfect match.
pub fn dice(a: &VoxelMask, b: &VoxelMask) -> Result<f64, MetricsError> {
    if a.grid != b.grid {
        return Err(MetricsError::GridMismatch);
    }
    let mut intersection = 0usize;
    let mut total = 0usize;
    for (&va, &vb) in a.occupancy.iter().zip(&b.occupancy) {
        intersection += (va && vb) as usize;
        total += va as usize + vb as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / total as f64)
}

/// Adjacency distance: over non-overlapping voxels only, the pooled mean
/// of the world distance from each voxel of `A\B` to the nearest voxel of
/// `B` and from each voxel of `B\A` to the nearest voxel of `A`, between
/// voxel centers. Identical masks have no non-overlapping voxels and
/// return 0 by convention.
pub fn adjacency(a: &VoxelMask, b: &VoxelMask) -> Result<f64, MetricsError> {
    if a.grid != b.grid {
        return Err(MetricsError::GridMismatch);
    }
    if a.occupancy == b.occupancy {
        return Ok(0.0);
    }
    if a.count() == 0 || b.count() == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let centers = |mask: &VoxelMask| -> Vec<Point3<f64>> {
        mask.occupied_indices()
            .into_iter()
            .map(|ijk| mask.grid.voxel_center(ijk))
            .collect()
    };
    let centers_a = centers(a);
    let centers_b = centers(b);

    let one_sided = |from: &VoxelMask, exclude: &VoxelMask, to: &[Point3<f64>]| -> Vec<f64> {
        let outside: Vec<Point3<f64>> = from
            .occupied_indices()
            .into_iter()
            .filter(|&ijk| !exclude.is_occupied(ijk))
            .map(|ijk| from.grid.voxel_center(ijk))
            .collect();
        outside
            .par_iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };

    let mut distances = one_sided(a, b, &centers_b);
    distances.extend(one_sided(b, a, &centers_a));
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// Occupied volume in mm^3 (voxel count times voxel size cubed).
pub fn volume(mask: &VoxelMask) -> f64 {
    mask.count() as f64 * mask.grid.voxel_size.powi(3)
}

fn sorted_ids_dice(a: &[u32], b: &[u32]) -> f64 {
    debug_assert!(a.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(b.windows(2).all(|w| w[0] < w[1]));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut intersection = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                intersection += 1;
                i += 1;
                j += 1;
            }
        }
    }
    2.0 * intersection as f64 / (a.len() + b.len()) as f64
}

/// Dice coefficient over selected streamline ID sets. Only meaningful
/// when both results were segmented from the same tractogram, which is
/// checked via provenance.
pub fn streamline_dice(a: &BundleResult, b: &BundleResult) -> Result<f64, MetricsError> {
    if a.tractogram != b.tractogram {
        return Err(MetricsError::ProvenanceMismatch {
            a: a.tractogram.clone(),
            b: b.tractogram.clone(),
        });
    }
    Ok(sorted_ids_dice(&a.selected_ids, &b.selected_ids))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareMode {
    RunRerun,
    ScanRescan,
}

/// Everything needed to compare one segmented bundle against another:
/// identity, per-streamline stats, and the voxelization.
#[derive(Clone, Debug)]
pub struct BundleSummary {
    pub name: String,
    /// Provenance of the tractogram the bundle came from.
    pub tractogram: String,
    /// Selected streamline IDs (sorted), when known.
    pub ids: Option<Vec<u32>>,
    pub streamline_count: usize,
    pub mean_length_mm: f64,
    pub mask: VoxelMask,
}

impl BundleSummary {
    pub fn new(
        name: impl Into<String>,
        tractogram: impl Into<String>,
        ids: Option<Vec<u32>>,
        streamlines: &[Streamline],
        grid: &GridSpec,
    ) -> Self {
        let mean_length_mm = if streamlines.is_empty() {
            0.0
        } else {
            streamlines.iter().map(|s| s.length()).sum::<f64>() / streamlines.len() as f64
        };
        Self {
            name: name.into(),
            tractogram: tractogram.into(),
            ids,
            streamline_count: streamlines.len(),
            mean_length_mm,
            mask: voxelize(streamlines, grid),
        }
    }
}

/// Agreement measures between two segmentations of the same bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub bundle_a: String,
    pub bundle_b: String,
    pub mode: CompareMode,
    pub dice: f64,
    pub adjacency_mm: f64,
    pub volume_delta_mm3: f64,
    pub streamline_count_delta: u64,
    pub mean_length_delta_mm: f64,
    /// Present only in run-rerun mode, where both sides index the same
    /// tractogram.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub streamline_dice: Option<f64>,
}

/// Compares two segmented bundles on a shared grid. Run-rerun mode also
/// computes the streamline Dice, which requires ID sets and matching
/// tractogram provenance; scan-rescan mode omits it.
pub fn compare_bundles(
    a: &BundleSummary,
    b: &BundleSummary,
    mode: CompareMode,
) -> Result<ComparisonReport, MetricsError> {
    let dice_value = dice(&a.mask, &b.mask)?;
    let adjacency_mm = adjacency(&a.mask, &b.mask)?;
    let streamline_dice = match mode {
        CompareMode::ScanRescan => None,
        CompareMode::RunRerun => {
            if a.tractogram != b.tractogram {
                return Err(MetricsError::ProvenanceMismatch {
                    a: a.tractogram.clone(),
                    b: b.tractogram.clone(),
                });
            }
            let (Some(ids_a), Some(ids_b)) = (&a.ids, &b.ids) else {
                return Err(MetricsError::MissingIds);
            };
            Some(sorted_ids_dice(ids_a, ids_b))
        }
    };
    Ok(ComparisonReport {
        bundle_a: a.name.clone(),
        bundle_b: b.name.clone(),
        mode,
        dice: dice_value,
        adjacency_mm,
        volume_delta_mm3: (volume(&a.mask) - volume(&b.mask)).abs(),
        streamline_count_delta: (a.streamline_count as i64 - b.streamline_count as i64)
            .unsigned_abs(),
        mean_length_delta_mm: (a.mean_length_mm - b.mean_length_mm).abs(),
        streamline_dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streamline::Transform;
    use nalgebra::Point3;

    fn p(x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::new(x, y, z)
    }

    fn unit_grid(dims: [usize; 3]) -> GridSpec {
        GridSpec::axis_aligned(Point3::origin(), 1.0, dims)
    }

    #[test]
    fn axis_aligned_segment_occupies_a_line() {
        let grid = unit_grid([16, 4, 4]);
        let s = Streamline::new(vec![p(1.0, 1.0, 1.0), p(11.0, 1.0, 1.0)]).unwrap();
        let mask = voxelize(&[s], &grid);
        let occupied = mask.occupied_indices();
        assert!(
            (10..=11).contains(&occupied.len()),
            "{} voxels",
            occupied.len()
        );
        for ijk in &occupied {
            assert_eq!(ijk[1], 1);
            assert_eq!(ijk[2], 1);
        }
    }

    #[test]
    fn empty_bundle_gives_empty_mask() {
        let mask = voxelize(&[], &unit_grid([4, 4, 4]));
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn grid_auto_expands_for_outside_points() {
        let grid = unit_grid([4, 4, 4]);
        let s = Streamline::new(vec![p(-3.0, 1.0, 1.0), p(8.0, 1.0, 1.0)]).unwrap();
        let mask = voxelize(&[s], &grid);
        assert!(mask.count() >= 11);
        assert!(mask.grid().dims()[0] >= 12);
        // Alignment is preserved: voxel centers still land on integers.
        let c = mask.grid().voxel_center([0, 0, 0]);
        assert_eq!(c.x.fract(), 0.0);
    }

    #[test]
    fn subvoxel_jitter_barely_changes_occupancy() {
        let grid = unit_grid([40, 24, 8]);
        let bundle: Vec<Streamline> = (0..20)
            .map(|i| {
                let y = 4.0 + i as f64 * 0.7;
                Streamline::new(vec![p(2.0, y, 3.0), p(34.0, y, 3.0)]).unwrap()
            })
            .collect();
        let jittered: Vec<Streamline> = bundle
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pts = s
                    .points()
                    .iter()
                    .enumerate()
                    .map(|(j, q)| {
                        let f = (i * 7 + j) as f64;
                        q + nalgebra::Vector3::new((f * 1.3).sin(), (f * 0.7).cos(), (f * 2.9).sin())
                            * 0.1
                    })
                    .collect();
                Streamline::new(pts).unwrap()
            })
            .collect();
        let a = voxelize(&bundle, &grid);
        let b = voxelize(&jittered, &grid);
        assert!(dice(&a, &b).unwrap() > 0.9);
    }

    #[test]
    fn dice_trivial_cases() {
        let grid = unit_grid([20, 10, 10]);
        let a = VoxelMask::from_indices(grid.clone(), &[[0, 0, 0], [1, 0, 0]]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = VoxelMask::from_indices(grid.clone(), &[[5, 5, 5]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // Two 1000-voxel boxes overlapping in 500.
        let box_indices = |x0: usize| -> Vec<[usize; 3]> {
            let mut v = Vec::new();
            for x in x0..x0 + 10 {
                for y in 0..10 {
                    for z in 0..10 {
                        v.push([x, y, z]);
                    }
                }
            }
            v
        };
        let left = VoxelMask::from_indices(grid.clone(), &box_indices(0));
        let right = VoxelMask::from_indices(grid.clone(), &box_indices(5));
        assert_eq!(dice(&left, &right).unwrap(), 0.5);
        // Both empty: perfect match by convention.
        let empty = VoxelMask::empty(grid);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_grid_mismatch() {
        let a = VoxelMask::empty(unit_grid([4, 4, 4]));
        let b = VoxelMask::empty(unit_grid([5, 4, 4]));
        assert!(matches!(dice(&a, &b), Err(MetricsError::GridMismatch)));
    }

    #[test]
    fn adjacency_trivial_cases() {
        let grid = unit_grid([8, 4, 4]);
        let a = VoxelMask::from_indices(grid.clone(), &[[0, 0, 0]]);
        assert_eq!(adjacency(&a, &a).unwrap(), 0.0);
        let b = VoxelMask::from_indices(grid.clone(), &[[3, 0, 0]]);
        assert_eq!(adjacency(&a, &b).unwrap(), 3.0);
        let empty = VoxelMask::empty(grid);
        assert!(matches!(adjacency(&a, &empty), Err(MetricsError::EmptyMask)));
    }

    /// Exhaustive nearest-voxel oracle, written as plain nested loops.
    fn adjacency_oracle(a: &VoxelMask, b: &VoxelMask) -> f64 {
        let centers = |m: &VoxelMask| -> Vec<Point3<f64>> {
            m.occupied_indices()
                .into_iter()
                .map(|ijk| m.grid().voxel_center(ijk))
                .collect()
        };
        let ca = centers(a);
        let cb = centers(b);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (idx, p) in a.occupied_indices().into_iter().zip(&ca) {
            if !b.is_occupied(idx) {
                let mut best = f64::INFINITY;
                for q in &cb {
                    best = best.min((p - q).norm());
                }
                sum += best;
                n += 1;
            }
        }
        for (idx, p) in b.occupied_indices().into_iter().zip(&cb) {
            if !a.is_occupied(idx) {
                let mut best = f64::INFINITY;
                for q in &ca {
                    best = best.min((p - q).norm());
                }
                sum += best;
                n += 1;
            }
        }
        sum / n as f64
    }

    fn pseudo_random_mask(grid: &GridSpec, seed: u64, fill: f64) -> VoxelMask {
        let mut indices = Vec::new();
        let [nx, ny, nz] = grid.dims();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let h = seed
                        .wrapping_mul(0x9e3779b97f4a7c15)
                        .wrapping_add((x * 73 + y * 179 + z * 283) as u64)
                        .wrapping_mul(0xbf58476d1ce4e5b9);
                    if (h >> 40) as f64 / (1u64 << 24) as f64 % 1.0 < fill {
                        indices.push([x, y, z]);
                    }
                }
            }
        }
        VoxelMask::from_indices(grid.clone(), &indices)
    }

    #[test]
    fn adjacency_matches_exhaustive_oracle() {
        let grid = unit_grid([9, 7, 5]);
        for seeds in [(1u64, 2u64), (3, 4), (5, 6)] {
            let a = pseudo_random_mask(&grid, seeds.0, 0.15);
            let b = pseudo_random_mask(&grid, seeds.1, 0.15);
            if a.count() == 0 || b.count() == 0 {
                continue;
            }
            let got = adjacency(&a, &b).unwrap();
            let expected = adjacency_oracle(&a, &b);
            assert!((got - expected).abs() < 1e-6);
            // Symmetry, and at least one voxel apart whenever masks differ.
            assert!((adjacency(&b, &a).unwrap() - got).abs() < 1e-12);
            if a != b {
                assert!(got >= grid.voxel_size());
            }
        }
    }

    #[test]
    fn volume_cases() {
        let grid = unit_grid([10, 10, 10]);
        let indices: Vec<[usize; 3]> = (0..42).map(|i| [i % 10, (i / 10) % 10, i / 100]).collect();
        let mask = VoxelMask::from_indices(grid.clone(), &indices);
        assert_eq!(volume(&mask), 42.0);
        assert_eq!(volume(&VoxelMask::empty(grid)), 0.0);
        let grid2 = GridSpec::axis_aligned(Point3::origin(), 2.0, [8, 8, 8]);
        let indices2: Vec<[usize; 3]> = (0..10).map(|i| [i, 0, 0]).collect();
        let mask2 = VoxelMask::from_indices(grid2, &indices2);
        assert_eq!(volume(&mask2), 80.0);
    }

    #[test]
    fn volume_additive_over_disjoint_masks() {
        let grid = unit_grid([10, 10, 10]);
        let a = VoxelMask::from_indices(grid.clone(), &[[0, 0, 0], [1, 0, 0]]);
        let b = VoxelMask::from_indices(grid.clone(), &[[5, 5, 5], [6, 5, 5], [7, 5, 5]]);
        let union: Vec<[usize; 3]> = a
            .occupied_indices()
            .into_iter()
            .chain(b.occupied_indices())
            .collect();
        let u = VoxelMask::from_indices(grid, &union);
        assert_eq!(volume(&u), volume(&a) + volume(&b));
    }

    #[test]
    fn whole_voxel_shift_translates_occupancy() {
        let grid = unit_grid([30, 12, 8]);
        let bundle = vec![
            Streamline::new(vec![p(3.2, 4.1, 2.7), p(12.9, 6.3, 3.4), p(20.0, 5.0, 2.0)]).unwrap(),
        ];
        let shifted: Vec<Streamline> = bundle
            .iter()
            .map(|s| s.transformed(&Transform::translation(nalgebra::Vector3::new(3.0, 2.0, 1.0))))
            .collect();
        let a = voxelize(&bundle, &grid);
        let b = voxelize(&shifted, &grid);
        let mut moved: Vec<[usize; 3]> = a
            .occupied_indices()
            .into_iter()
            .map(|[x, y, z]| [x + 3, y + 2, z + 1])
            .collect();
        moved.sort_unstable();
        let mut got = b.occupied_indices();
        got.sort_unstable();
        assert_eq!(moved, got);
    }

    fn result_with_ids(ids: Vec<u32>, tractogram: &str) -> BundleResult {
        BundleResult {
            name: "x".into(),
            tractogram: tractogram.into(),
            distances: vec![0.0; ids.len()],
            selected_ids: ids,
            final_transform: Transform::identity(),
            iterations: vec![],
            warning: None,
        }
    }

    #[test]
    fn streamline_dice_cases() {
        let a = result_with_ids((1..=100).collect(), "t");
        assert_eq!(streamline_dice(&a, &a).unwrap(), 1.0);
        let b = result_with_ids((51..=150).collect(), "t");
        assert_eq!(streamline_dice(&a, &b).unwrap(), 0.5);
        let c = result_with_ids((200..=220).collect(), "t");
        assert_eq!(streamline_dice(&a, &c).unwrap(), 0.0);
        let empty = result_with_ids(vec![], "t");
        assert_eq!(streamline_dice(&empty, &empty).unwrap(), 1.0);
        let other = result_with_ids(vec![1], "other");
        assert!(matches!(
            streamline_dice(&a, &other),
            Err(MetricsError::ProvenanceMismatch { .. })
        ));
    }

    fn summary_of(lines: &[(f64, f64)], grid: &GridSpec, ids: Option<Vec<u32>>) -> BundleSummary {
        let streamlines: Vec<Streamline> = lines
            .iter()
            .map(|&(y, len)| Streamline::new(vec![p(1.0, y, 1.0), p(1.0 + len, y, 1.0)]).unwrap())
            .collect();
        BundleSummary::new("bundle", "tracto", ids, &streamlines, grid)
    }

    #[test]
    fn compare_identical_bundles() {
        let grid = unit_grid([30, 10, 4]);
        let a = summary_of(&[(2.0, 20.0), (3.0, 20.0)], &grid, Some(vec![0, 1]));
        let report = compare_bundles(&a, &a, CompareMode::RunRerun).unwrap();
        assert_eq!(report.dice, 1.0);
        assert_eq!(report.adjacency_mm, 0.0);
        assert_eq!(report.volume_delta_mm3, 0.0);
        assert_eq!(report.streamline_count_delta, 0);
        assert_eq!(report.mean_length_delta_mm, 0.0);
        assert_eq!(report.streamline_dice, Some(1.0));
    }

    #[test]
    fn compare_constructed_offsets() {
        let grid = unit_grid([40, 10, 4]);
        // Lengths 20 vs 26, one extra streamline on the B side.
        let a = summary_of(&[(2.0, 20.0), (4.0, 20.0)], &grid, None);
        let b = summary_of(&[(2.0, 26.0), (4.0, 26.0), (6.0, 26.0)], &grid, None);
        let report = compare_bundles(&a, &b, CompareMode::ScanRescan).unwrap();
        assert_eq!(report.streamline_count_delta, 1);
        assert!((report.mean_length_delta_mm - 6.0).abs() < 1e-12);
        assert!(report.streamline_dice.is_none());
        assert!(report.volume_delta_mm3 > 0.0);
    }

    #[test]
    fn run_rerun_compare_requires_ids() {
        let grid = unit_grid([30, 10, 4]);
        let a = summary_of(&[(2.0, 20.0)], &grid, None);
        assert!(matches!(
            compare_bundles(&a, &a, CompareMode::RunRerun),
            Err(MetricsError::MissingIds)
        ));
    }
}
