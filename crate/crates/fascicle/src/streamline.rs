//! Streamline data model: polylines in world millimetres, arc-length
//! resampling, and homogeneous transforms.

use nalgebra::{Matrix4, Point3, Vector3};
use thiserror::Error;

/// Errors from streamline construction and geometric operations.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("streamline has a non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },
    #[error("streamline is degenerate: fewer than 2 distinct consecutive points")]
    Degenerate,
    #[error("resample requires at least 2 points, got {requested}")]
    InvalidResampleCount { requested: usize },
    #[error("transform matrix last row must be (0, 0, 0, 1)")]
    NotHomogeneous,
    #[error("rigid transform requires an orthonormal rotation block with determinant +1")]
    NotRigid,
    #[error("streamline {index}: {source}")]
    InvalidStreamline {
        index: usize,
        source: Box<GeometryError>,
    },
}

/// An ordered polyline of 3D points in world millimetres.
///
/// Construction normalizes the input: consecutive duplicate points are
/// dropped (zero-length segments carry no arc length), and anything left
/// with fewer than 2 points is rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Streamline {
    points: Vec<Point3<f64>>,
}

impl Streamline {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, GeometryError> {
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeometryError::NonFiniteCoordinate { index });
            }
        }
        let mut deduped: Vec<Point3<f64>> = Vec::with_capacity(points.len());
        for p in points {
            if deduped.last() != Some(&p) {
                deduped.push(p);
            }
        }
        if deduped.len() < 2 {
            return Err(GeometryError::Degenerate);
        }
        Ok(Self { points: deduped })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Total arc length in millimetres (sum of segment Euclidean lengths).
    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum()
    }

    /// Resamples to exactly `m` points uniformly spaced by arc length.
    /// Endpoints are preserved exactly.
    pub fn resample(&self, m: usize) -> Result<ResampledStreamline, GeometryError> {
        if m < 2 {
            return Err(GeometryError::InvalidResampleCount { requested: m });
        }
        // Cumulative arc length at each vertex. Construction guarantees
        // every segment has positive length, so `total > 0`.
        let mut cumulative = Vec::with_capacity(self.points.len());
        cumulative.push(0.0);
        let mut total = 0.0;
        for w in self.points.windows(2) {
            total += (w[1] - w[0]).norm();
            cumulative.push(total);
        }

        let mut out = Vec::with_capacity(m);
        out.push(self.points[0]);
        let mut segment = 0usize;
        for k in 1..m - 1 {
            let target = total * (k as f64) / ((m - 1) as f64);
            while segment + 2 < cumulative.len() && cumulative[segment + 1] < target {
                segment += 1;
            }
            let seg_start = cumulative[segment];
            let seg_len = cumulative[segment + 1] - seg_start;
            let t = (target - seg_start) / seg_len;
            let p = self.points[segment] + (self.points[segment + 1] - self.points[segment]) * t;
            out.push(p);
        }
        out.push(*self.points.last().unwrap());
        Ok(ResampledStreamline { points: out })
    }

    /// Maps every point through the homogeneous matrix.
    pub fn transformed(&self, t: &Transform) -> Streamline {
        Streamline {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        bounds_of(&self.points).unwrap()
    }
}

pub(crate) fn bounds_of(points: &[Point3<f64>]) -> Option<(Point3<f64>, Point3<f64>)> {
    let first = points.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in points {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(p[axis]);
            hi[axis] = hi[axis].max(p[axis]);
        }
    }
    Some((lo, hi))
}

/// A streamline resampled to a fixed number of points, equidistant along
/// the source polyline's arc length. All distance computations operate on
/// this representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampledStreamline {
    points: Vec<Point3<f64>>,
}

impl ResampledStreamline {
    /// Wraps points without re-checking uniform spacing; used where the
    /// spacing invariant is inherited (flips, rigid transforms) or where
    /// the caller asserts it.
    pub(crate) fn from_points(points: Vec<Point3<f64>>) -> Self {
        debug_assert!(points.len() >= 2);
        Self { points }
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Reverses point order. An involution: `flipped(flipped(s)) == s`.
    pub fn flipped(&self) -> ResampledStreamline {
        let mut points = self.points.clone();
        points.reverse();
        ResampledStreamline { points }
    }

    /// Arithmetic mean of the points.
    pub fn centroid(&self) -> Point3<f64> {
        let mut sum = Vector3::zeros();
        for p in &self.points {
            sum += p.coords;
        }
        Point3::from(sum / self.points.len() as f64)
    }

    pub fn transformed(&self, t: &Transform) -> ResampledStreamline {
        ResampledStreamline {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum()
    }
}

/// Classification of a linear transform, from most to least constrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Rigid,
    RigidScale,
    Affine,
}

impl TransformKind {
    /// The weakest of two kinds; composition can only lose structure.
    pub fn merge(self, other: TransformKind) -> TransformKind {
        use TransformKind::*;
        match (self, other) {
            (Rigid, Rigid) => Rigid,
            (Affine, _) | (_, Affine) => Affine,
            _ => RigidScale,
        }
    }
}

/// A 4x4 homogeneous transform (3x3 linear block + translation, in mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    matrix: Matrix4<f64>,
    kind: TransformKind,
}

const RIGID_TOLERANCE: f64 = 1e-6;

impl Transform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
            kind: TransformKind::Rigid,
        }
    }

    /// Validates that the matrix is homogeneous (last row 0,0,0,1) and,
    /// for the rigid kind, that the 3x3 block is orthonormal with
    /// determinant +1 within 1e-6.
    pub fn new(matrix: Matrix4<f64>, kind: TransformKind) -> Result<Self, GeometryError> {
        let last = matrix.row(3);
        if (last[0], last[1], last[2], last[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(GeometryError::NotHomogeneous);
        }
        if kind == TransformKind::Rigid {
            let r = matrix.fixed_view::<3, 3>(0, 0).into_owned();
            let gram = r.transpose() * r;
            let mut max_dev: f64 = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    max_dev = max_dev.max((gram[(i, j)] - expected).abs());
                }
            }
            if max_dev > RIGID_TOLERANCE || (r.determinant() - 1.0).abs() > RIGID_TOLERANCE {
                return Err(GeometryError::NotRigid);
            }
        }
        Ok(Self { matrix, kind })
    }

    pub fn translation(offset: Vector3<f64>) -> Self {
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
        Self {
            matrix,
            kind: TransformKind::Rigid,
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.matrix.transform_point(p)
    }

    /// Composition `next ∘ self`: apply `self` first, then `next`.
    pub fn then(&self, next: &Transform) -> Transform {
        Transform {
            matrix: next.matrix * self.matrix,
            kind: self.kind.merge(next.kind),
        }
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.matrix[(i, j)];
            }
        }
        rows
    }

    pub fn from_rows(rows: [[f64; 4]; 4], kind: TransformKind) -> Result<Self, GeometryError> {
        let mut matrix = Matrix4::zeros();
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                matrix[(i, j)] = *v;
            }
        }
        Self::new(matrix, kind)
    }
}

/// A whole-brain (or synthetic) set of streamlines. Order is stable and
/// streamline IDs are positions in the sequence.
#[derive(Clone, Debug)]
pub struct Tractogram {
    streamlines: Vec<Streamline>,
    provenance: String,
}

impl Tractogram {
    /// Builds from raw point lists, normalizing each streamline. Errors
    /// name the offending streamline index.
    pub fn new(
        raw: Vec<Vec<Point3<f64>>>,
        provenance: impl Into<String>,
    ) -> Result<Self, GeometryError> {
        let streamlines = raw
            .into_iter()
            .enumerate()
            .map(|(index, points)| {
                Streamline::new(points).map_err(|source| GeometryError::InvalidStreamline {
                    index,
                    source: Box::new(source),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            streamlines,
            provenance: provenance.into(),
        })
    }

    pub fn from_streamlines(streamlines: Vec<Streamline>, provenance: impl Into<String>) -> Self {
        Self {
            streamlines,
            provenance: provenance.into(),
        }
    }

    pub fn streamlines(&self) -> &[Streamline] {
        &self.streamlines
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    /// Source file path, or "synthetic" for generated data.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn resample_all(&self, m: usize) -> Result<Vec<ResampledStreamline>, GeometryError> {
        self.streamlines.iter().map(|s| s.resample(m)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::new(x, y, z)
    }

    #[test]
    fn rejects_single_point_and_degenerate() {
        assert!(matches!(
            Streamline::new(vec![p(1.0, 2.0, 3.0)]),
            Err(GeometryError::Degenerate)
        ));
        // All points identical collapses to one after dedup.
        assert!(matches!(
            Streamline::new(vec![p(1.0, 1.0, 1.0); 5]),
            Err(GeometryError::Degenerate)
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let result = Streamline::new(vec![p(0.0, 0.0, 0.0), p(f64::NAN, 0.0, 0.0)]);
        assert!(matches!(
            result,
            Err(GeometryError::NonFiniteCoordinate { index: 1 })
        ));
    }

    #[test]
    fn drops_consecutive_duplicates() {
        let s = Streamline::new(vec![
            p(0.0, 0.0, 0.0),
            p(0.0, 0.0, 0.0),
            p(1.0, 0.0, 0.0),
            p(1.0, 0.0, 0.0),
            p(2.0, 0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(s.num_points(), 3);
    }

    #[test]
    fn length_of_345_triangle_leg() {
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(3.0, 4.0, 0.0)]).unwrap();
        assert_eq!(s.length(), 5.0);
    }

    #[test]
    fn length_of_closed_unit_square() {
        let s = Streamline::new(vec![
            p(0.0, 0.0, 0.0),
            p(1.0, 0.0, 0.0),
            p(1.0, 1.0, 0.0),
            p(0.0, 1.0, 0.0),
            p(0.0, 0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(s.length(), 4.0);
    }

    #[test]
    fn resample_straight_segment() {
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(10.0, 0.0, 0.0)]).unwrap();
        let r = s.resample(3).unwrap();
        assert_eq!(
            r.points(),
            &[p(0.0, 0.0, 0.0), p(5.0, 0.0, 0.0), p(10.0, 0.0, 0.0)]
        );
    }

    #[test]
    fn resample_elbow_hits_vertices() {
        // Arc lengths 0, 1, 2: the mid sample lands exactly on the corner.
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0), p(1.0, 1.0, 0.0)])
            .unwrap();
        let r = s.resample(3).unwrap();
        assert_eq!(
            r.points(),
            &[p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0), p(1.0, 1.0, 0.0)]
        );
    }

    #[test]
    fn resample_rejects_m_below_two() {
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)]).unwrap();
        assert!(matches!(
            s.resample(1),
            Err(GeometryError::InvalidResampleCount { requested: 1 })
        ));
    }

    /// Independent oracle: evaluate the polyline at a given arc-length
    /// fraction by scanning segments, without reusing `resample`.
    fn interpolate_at_fraction(points: &[Point3<f64>], fraction: f64) -> Point3<f64> {
        let total: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        let target = total * fraction;
        let mut walked = 0.0;
        for w in points.windows(2) {
            let seg = (w[1] - w[0]).norm();
            if walked + seg >= target {
                let t = (target - walked) / seg;
                return w[0] + (w[1] - w[0]) * t;
            }
            walked += seg;
        }
        *points.last().unwrap()
    }

    #[test]
    fn resample_matches_interpolation_oracle() {
        // Deterministic wiggly 50-point polyline.
        let points: Vec<Point3<f64>> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.37;
                p(
                    t * 2.0 + (t * 1.3).sin(),
                    (t * 0.7).cos() * 3.0,
                    t + (t * 2.1).sin() * 0.5,
                )
            })
            .collect();
        let s = Streamline::new(points.clone()).unwrap();
        let m = 32;
        let r = s.resample(m).unwrap();
        for (k, q) in r.points().iter().enumerate() {
            let expected = interpolate_at_fraction(&points, k as f64 / (m - 1) as f64);
            assert!(
                (q - expected).norm() < 1e-6,
                "point {k}: got {q:?}, oracle {expected:?}"
            );
        }
        // Endpoints must be exact.
        assert_eq!(r.points()[0], points[0]);
        assert_eq!(r.points()[m - 1], points[49]);
    }

    #[test]
    fn resample_idempotent_on_uniform_input() {
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(10.0, 0.0, 0.0)]).unwrap();
        let r = s.resample(8).unwrap();
        let again = Streamline::new(r.points().to_vec())
            .unwrap()
            .resample(8)
            .unwrap();
        for (a, b) in r.points().iter().zip(again.points()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn flip_reverses_and_is_involutive() {
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0), p(1.0, 1.0, 0.0)])
            .unwrap()
            .resample(3)
            .unwrap();
        let f = s.flipped();
        assert_eq!(f.points()[0], p(1.0, 1.0, 0.0));
        assert_eq!(f.points()[2], p(0.0, 0.0, 0.0));
        assert_eq!(f.flipped(), s);
    }

    #[test]
    fn flip_fixes_palindrome() {
        let s = ResampledStreamline::from_points(vec![
            p(0.0, 0.0, 0.0),
            p(1.0, 0.0, 0.0),
            p(0.0, 0.0, 0.0),
        ]);
        assert_eq!(s.flipped(), s);
    }

    #[test]
    fn centroid_trivial_and_flip_invariant() {
        let s = ResampledStreamline::from_points(vec![p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)]);
        assert_eq!(s.centroid(), p(1.0, 0.0, 0.0));
        assert_eq!(s.centroid(), s.flipped().centroid());
    }

    #[test]
    fn centroid_matches_mean_oracle() {
        let pts: Vec<Point3<f64>> = (0..17)
            .map(|i| p((i as f64).sin(), (i as f64 * 0.3).cos(), i as f64))
            .collect();
        let s = ResampledStreamline::from_points(pts.clone());
        let mut mean = Vector3::zeros();
        for q in &pts {
            mean += q.coords;
        }
        mean /= pts.len() as f64;
        assert!((s.centroid().coords - mean).norm() < 1e-12);
    }

    #[test]
    fn identity_transform_is_noop() {
        let s = Streamline::new(vec![p(1.0, 2.0, 3.0), p(4.0, 5.0, 6.0)]).unwrap();
        assert_eq!(s.transformed(&Transform::identity()), s);
    }

    #[test]
    fn translation_moves_points() {
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)]).unwrap();
        let t = Transform::translation(Vector3::new(2.0, 0.0, 0.0));
        let moved = s.transformed(&t);
        assert_eq!(moved.points(), &[p(2.0, 0.0, 0.0), p(3.0, 0.0, 0.0)]);
    }

    #[test]
    fn z_rotation_by_quarter_turn() {
        let (s, c) = (std::f64::consts::FRAC_PI_2.sin(), std::f64::consts::FRAC_PI_2.cos());
        let mut m = Matrix4::identity();
        m[(0, 0)] = c;
        m[(0, 1)] = -s;
        m[(1, 0)] = s;
        m[(1, 1)] = c;
        let t = Transform::new(m, TransformKind::Rigid).unwrap();
        let rotated = t.apply(&p(1.0, 0.0, 0.0));
        assert!((rotated - p(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn rigid_validation_rejects_scaling() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(matches!(
            Transform::new(m, TransformKind::Rigid),
            Err(GeometryError::NotRigid)
        ));
        // Same matrix is fine as affine.
        assert!(Transform::new(m, TransformKind::Affine).is_ok());
    }

    #[test]
    fn non_homogeneous_last_row_rejected() {
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.5;
        assert!(matches!(
            Transform::new(m, TransformKind::Affine),
            Err(GeometryError::NotHomogeneous)
        ));
    }

    #[test]
    fn tractogram_reports_bad_streamline_index() {
        let raw = vec![
            vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)],
            vec![p(5.0, 5.0, 5.0)],
        ];
        match Tractogram::new(raw, "test") {
            Err(GeometryError::InvalidStreamline { index: 1, .. }) => {}
            other => panic!("expected InvalidStreamline at 1, got {other:?}"),
        }
    }

    #[test]
    fn rigid_transform_preserves_length() {
        let s = Streamline::new(vec![p(0.0, 0.0, 0.0), p(1.0, 2.0, 3.0), p(-1.0, 4.0, 0.5)])
            .unwrap();
        let angle: f64 = 0.7;
        let (sin, cos) = angle.sin_cos();
        let mut m = Matrix4::identity();
        m[(0, 0)] = cos;
        m[(0, 2)] = sin;
        m[(2, 0)] = -sin;
        m[(2, 2)] = cos;
        m[(1, 3)] = 12.0;
        let t = Transform::new(m, TransformKind::Rigid).unwrap();
        let moved = s.transformed(&t);
        assert!((moved.length() - s.length()).abs() / s.length() < 1e-9);
    }
}
