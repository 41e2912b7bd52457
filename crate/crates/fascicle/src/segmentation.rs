//! The iterative bundle segmentation procedure: alternate an exact radius
//! search of the (transformed) model against the indexed tractogram with a
//! per-bundle registration refinement, over a decreasing radius schedule,
//! then prune at the final radius.
//!
//! The tractogram is never mutated; refinements compose onto the model
//! side. Everything is deterministic, so identical inputs always yield
//! identical results, bundle by bundle.

use rayon::prelude::*;
use thiserror::Error;

use crate::registration::{slr_fit, RegistrationError, SlrSettings};
use crate::search::{FssIndex, SearchError};
use crate::streamline::{ResampledStreamline, Transform};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("invalid radius schedule: {0}")]
    InvalidSchedule(String),
    #[error("bundle model '{name}' has no streamlines")]
    EmptyModel { name: String },
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

/// Builds a geometric radius schedule from `start_factor * prune_radius`
/// down to `prune_radius`, strictly decreasing with `n_steps` entries
/// (fewer if a factor of 1 collapses them).
pub fn make_schedule(
    prune_radius: f64,
    n_steps: usize,
    start_factor: f64,
) -> Result<Vec<f64>, SegmentationError> {
    if !(prune_radius > 0.0 && prune_radius.is_finite()) {
        return Err(SegmentationError::InvalidSchedule(format!(
            "prune radius must be positive, got {prune_radius}"
        )));
    }
    if n_steps < 1 {
        return Err(SegmentationError::InvalidSchedule(
            "schedule needs at least 1 step".into(),
        ));
    }
    if start_factor < 1.0 || start_factor.is_nan() {
        return Err(SegmentationError::InvalidSchedule(format!(
            "start factor must be >= 1, got {start_factor}"
        )));
    }
    if n_steps == 1 {
        return Ok(vec![prune_radius]);
    }
    let mut schedule = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let exponent = (n_steps - 1 - k) as f64 / (n_steps - 1) as f64;
        schedule.push(prune_radius * start_factor.powf(exponent));
    }
    schedule.dedup();
    Ok(schedule)
}

/// A model bundle to segment: reference streamlines (already resampled to
/// the index point count), the pruning radius — the method's single
/// parameter — and the decreasing search schedule ending at it.
#[derive(Clone, Debug)]
pub struct BundleModel {
    pub name: String,
    pub streamlines: Vec<ResampledStreamline>,
    pub prune_radius: f64,
    pub schedule: Vec<f64>,
}

impl BundleModel {
    pub fn new(
        name: impl Into<String>,
        streamlines: Vec<ResampledStreamline>,
        prune_radius: f64,
        schedule: Vec<f64>,
    ) -> Result<Self, SegmentationError> {
        let name = name.into();
        if streamlines.is_empty() {
            return Err(SegmentationError::EmptyModel { name });
        }
        if schedule.is_empty() {
            return Err(SegmentationError::InvalidSchedule("empty schedule".into()));
        }
        if !schedule.windows(2).all(|w| w[0] > w[1]) {
            return Err(SegmentationError::InvalidSchedule(format!(
                "schedule must be strictly decreasing, got {schedule:?}"
            )));
        }
        if *schedule.last().unwrap() != prune_radius || prune_radius <= 0.0 || prune_radius.is_nan() {
            return Err(SegmentationError::InvalidSchedule(format!(
                "schedule must end at the prune radius {prune_radius}, got {schedule:?}"
            )));
        }
        Ok(Self {
            name,
            streamlines,
            prune_radius,
            schedule,
        })
    }

    /// Convenience constructor with a geometric schedule.
    pub fn with_geometric_schedule(
        name: impl Into<String>,
        streamlines: Vec<ResampledStreamline>,
        prune_radius: f64,
        n_steps: usize,
        start_factor: f64,
    ) -> Result<Self, SegmentationError> {
        let schedule = make_schedule(prune_radius, n_steps, start_factor)?;
        Self::new(name, streamlines, prune_radius, schedule)
    }
}

/// One search/register pass of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub radius: f64,
    /// Distinct tractogram streamlines matched at this radius.
    pub matches: usize,
    /// Bundle cost after this pass's registration refinement.
    pub cost: f64,
}

/// Outcome of segmenting one bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleResult {
    pub name: String,
    /// Provenance of the tractogram the IDs refer to.
    pub tractogram: String,
    /// Selected tractogram streamline IDs, sorted ascending.
    pub selected_ids: Vec<u32>,
    /// Final MDF to the nearest model streamline, parallel to
    /// `selected_ids`; every value is within the prune radius.
    pub distances: Vec<f64>,
    /// Full transform applied to the model (global alignment composed
    /// with every refinement).
    pub final_transform: Transform,
    pub iterations: Vec<IterationRecord>,
    /// Set when an iteration matched nothing and the bundle was returned
    /// empty early.
    pub warning: Option<String>,
}

/// Runs the iterative procedure for one bundle: at each schedule radius,
/// search the currently transformed model against the index, then refine
/// the alignment against the matched streamlines; after the last pass,
/// select every tractogram streamline within the prune radius of the
/// final transformed model.
///
/// An iteration with no matches returns early with empty `selected_ids`
/// and a warning rather than an error, so batch atlas runs complete.
pub fn segment_bundle(
    index: &FssIndex,
    model: &BundleModel,
    slr: &SlrSettings,
    global_affine: &Transform,
) -> Result<BundleResult, SegmentationError> {
    let mut current = *global_affine;
    let mut iterations = Vec::with_capacity(model.schedule.len());

    let transformed = |t: &Transform| -> Vec<ResampledStreamline> {
        model.streamlines.iter().map(|s| s.transformed(t)).collect()
    };

    for &radius in &model.schedule {
        let moved = transformed(&current);
        let matches = index.radius_search(&moved, radius)?;
        if matches.is_empty() {
            return Ok(BundleResult {
                name: model.name.clone(),
                tractogram: index.provenance().to_string(),
                selected_ids: Vec::new(),
                distances: Vec::new(),
                final_transform: current,
                iterations,
                warning: Some(format!("no streamlines within {radius} mm; bundle left empty")),
            });
        }
        let target_ids = matches.target_ids();
        let targets: Vec<ResampledStreamline> = target_ids
            .iter()
            .map(|&id| index.source_streamline(id))
            .collect();
        let fit = slr_fit(&moved, &targets, slr.kind, &Transform::identity(), &slr.optimizer)?;
        current = current.then(&fit.transform);
        iterations.push(IterationRecord {
            radius,
            matches: target_ids.len(),
            cost: fit.cost,
        });
    }

    let moved = transformed(&current);
    let selection = index.radius_search(&moved, model.prune_radius)?;
    let distance_map = selection.min_distance_map();
    let mut selected_ids = Vec::with_capacity(distance_map.len());
    let mut distances = Vec::with_capacity(distance_map.len());
    for (id, distance) in distance_map {
        selected_ids.push(id);
        distances.push(distance);
    }

    Ok(BundleResult {
        name: model.name.clone(),
        tractogram: index.provenance().to_string(),
        selected_ids,
        distances,
        final_transform: current,
        iterations,
        warning: None,
    })
}

/// Segments every model independently against the shared index. Bundles
/// run in parallel; output order equals input order and a streamline may
/// belong to several bundles.
pub fn segment_all(
    index: &FssIndex,
    models: &[BundleModel],
    slr: &SlrSettings,
    global_affine: &Transform,
) -> Result<Vec<BundleResult>, SegmentationError> {
    models
        .par_iter()
        .map(|model| segment_bundle(index, model, slr, global_affine))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::build_index;
    use crate::streamline::{Streamline, Tractogram};
    use nalgebra::Point3;

    #[test]
    fn schedule_single_step_ignores_factor() {
        assert_eq!(make_schedule(8.0, 1, 2.0).unwrap(), vec![8.0]);
    }

    #[test]
    fn schedule_geometric_three_steps() {
        let s = make_schedule(8.0, 3, 2.0).unwrap();
        assert_eq!(s.len(), 3);
        // By hand: 8 * 2^(1 - k/2) for k = 0..2.
        for (k, v) in s.iter().enumerate() {
            let expected = 8.0 * 2.0_f64.powf(1.0 - k as f64 / 2.0);
            assert!((v - expected).abs() < 1e-12, "step {k}: {v}");
        }
        assert_eq!(s[0], 16.0);
        assert_eq!(s[2], 8.0);
    }

    #[test]
    fn schedule_degenerate_factor_collapses() {
        assert_eq!(make_schedule(5.0, 4, 1.0).unwrap(), vec![5.0]);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(make_schedule(0.0, 3, 2.0).is_err());
        assert!(make_schedule(-2.0, 3, 2.0).is_err());
        assert!(make_schedule(8.0, 0, 2.0).is_err());
        assert!(make_schedule(8.0, 3, 0.5).is_err());
    }

    #[test]
    fn model_rejects_non_decreasing_schedule() {
        let s = line_streamlines(&[0.0]);
        assert!(matches!(
            BundleModel::new("x", s.clone(), 8.0, vec![8.0, 16.0]),
            Err(SegmentationError::InvalidSchedule(_))
        ));
        assert!(matches!(
            BundleModel::new("x", s, 4.0, vec![16.0, 8.0]),
            Err(SegmentationError::InvalidSchedule(_))
        ));
        assert!(matches!(
            BundleModel::new("x", vec![], 8.0, vec![8.0]),
            Err(SegmentationError::EmptyModel { .. })
        ));
    }

    const M: usize = 8;

    fn line_streamlines(ys: &[f64]) -> Vec<ResampledStreamline> {
        ys.iter()
            .map(|&y| {
                Streamline::new(vec![Point3::new(0.0, y, 0.0), Point3::new(20.0, y, 0.0)])
                    .unwrap()
                    .resample(M)
                    .unwrap()
            })
            .collect()
    }

    fn line_tractogram(ys: &[f64]) -> Tractogram {
        let raw = ys
            .iter()
            .map(|&y| vec![Point3::new(0.0, y, 0.0), Point3::new(20.0, y, 0.0)])
            .collect();
        Tractogram::new(raw, "synthetic").unwrap()
    }

    #[test]
    fn self_segmentation_selects_everything() {
        let ys = [0.0, 1.0, 2.0, 3.0];
        let t = line_tractogram(&ys);
        let index = build_index(&t, M).unwrap();
        let model = BundleModel::with_geometric_schedule(
            "self",
            line_streamlines(&ys),
            8.0,
            3,
            2.0,
        )
        .unwrap();
        let result =
            segment_bundle(&index, &model, &SlrSettings::default(), &Transform::identity())
                .unwrap();
        assert_eq!(result.selected_ids, vec![0, 1, 2, 3]);
        assert!(result.warning.is_none());
        for d in &result.distances {
            assert!(*d < 1e-6, "distance {d}");
        }
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((result.final_transform.matrix()[(i, j)] - expected).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn far_decoys_are_never_selected() {
        let t = line_tractogram(&[0.0, 1.0, 2.0, 200.0, 300.0, 455.0]);
        let index = build_index(&t, M).unwrap();
        let model = BundleModel::with_geometric_schedule(
            "bundle",
            line_streamlines(&[0.0, 1.0, 2.0]),
            8.0,
            3,
            2.0,
        )
        .unwrap();
        let result =
            segment_bundle(&index, &model, &SlrSettings::default(), &Transform::identity())
                .unwrap();
        assert_eq!(result.selected_ids, vec![0, 1, 2]);
    }

    #[test]
    fn empty_match_returns_warning_not_error() {
        let t = line_tractogram(&[500.0]);
        let index = build_index(&t, M).unwrap();
        let model =
            BundleModel::new("lost", line_streamlines(&[0.0]), 2.0, vec![4.0, 2.0]).unwrap();
        let result =
            segment_bundle(&index, &model, &SlrSettings::default(), &Transform::identity())
                .unwrap();
        assert!(result.selected_ids.is_empty());
        assert!(result.warning.is_some());
    }

    #[test]
    fn match_counts_monotone_when_registration_frozen() {
        let ys: Vec<f64> = (0..40).map(|i| i as f64 * 0.8).collect();
        let t = line_tractogram(&ys);
        let index = build_index(&t, M).unwrap();
        let mut slr = SlrSettings::default();
        // Freeze registration: zero poll iterations keep the transform at
        // its initial value.
        slr.optimizer.max_iterations = 0;
        let model = BundleModel::new(
            "frozen",
            line_streamlines(&[10.0]),
            2.0,
            vec![16.0, 8.0, 4.0, 2.0],
        )
        .unwrap();
        let result = segment_bundle(&index, &model, &slr, &Transform::identity()).unwrap();
        let counts: Vec<usize> = result.iterations.iter().map(|i| i.matches).collect();
        assert_eq!(counts.len(), 4);
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "match counts {counts:?} not monotone");
        }
    }

    #[test]
    fn segment_all_keeps_model_order_and_independence() {
        let t = line_tractogram(&[0.0, 1.0, 100.0, 101.0]);
        let index = build_index(&t, M).unwrap();
        let models = vec![
            BundleModel::with_geometric_schedule("a", line_streamlines(&[0.5]), 6.0, 2, 2.0)
                .unwrap(),
            BundleModel::with_geometric_schedule("b", line_streamlines(&[100.5]), 6.0, 2, 2.0)
                .unwrap(),
        ];
        let results =
            segment_all(&index, &models, &SlrSettings::default(), &Transform::identity()).unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].name, "a");
        assert_eq!(results[0].selected_ids, vec![0, 1]);
        assert_eq!(results[1].name, "b");
        assert_eq!(results[1].selected_ids, vec![2, 3]);
        assert!(segment_all(&index, &[], &SlrSettings::default(), &Transform::identity())
            .unwrap()
            .is_empty());
    }
}
