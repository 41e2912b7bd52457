//! Brute-force reference implementations and test helpers.
//!
//! These are the independent oracles the test suites check the indexed
//! implementations against: exhaustive all-pairs search instead of the
//! tree, and the full segmentation loop driven by it. Compiled only for
//! tests and under the `reference` feature; not part of the regular API.

use rayon::prelude::*;

use crate::distance::mdf;
use crate::registration::slr_fit;
use crate::registration::SlrSettings;
use crate::search::Match;
use crate::segmentation::{BundleModel, BundleResult, IterationRecord, SegmentationError};
use crate::streamline::{ResampledStreamline, Transform};

/// Exhaustive all-pairs MDF thresholding: every (query, target) pair with
/// distance within `radius`, sorted by (query, target). No pruning, no
/// cutoffs; parallel only across queries.
pub fn brute_force_radius_search(
    queries: &[ResampledStreamline],
    targets: &[ResampledStreamline],
    radius: f64,
) -> Vec<Match> {
    let per_query: Vec<Vec<Match>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut hits = Vec::new();
            for (ti, t) in targets.iter().enumerate() {
                let d = mdf(q, t).expect("uniform point counts");
                if d <= radius {
                    hits.push(Match {
                        query: qi as u32,
                        target: ti as u32,
                        distance: d,
                    });
                }
            }
            hits
        })
        .collect();
    per_query.into_iter().flatten().collect()
}

/// The iterative segmentation loop with the exhaustive search in place of
/// the index: identical schedule, identical registration, no tree.
pub fn brute_force_segment(
    model: &BundleModel,
    targets: &[ResampledStreamline],
    provenance: &str,
    slr: &SlrSettings,
    global_affine: &Transform,
) -> Result<BundleResult, SegmentationError> {
    let mut current = *global_affine;
    let mut iterations = Vec::new();

    let transformed = |t: &Transform| -> Vec<ResampledStreamline> {
        model.streamlines.iter().map(|s| s.transformed(t)).collect()
    };

    for &radius in &model.schedule {
        let moved = transformed(&current);
        let pairs = brute_force_radius_search(&moved, targets, radius);
        if pairs.is_empty() {
            return Ok(BundleResult {
                name: model.name.clone(),
                tractogram: provenance.to_string(),
                selected_ids: Vec::new(),
                distances: Vec::new(),
                final_transform: current,
                iterations,
                warning: Some(format!("no streamlines within {radius} mm; bundle left empty")),
            });
        }
        let mut target_ids: Vec<u32> = pairs.iter().map(|m| m.target).collect();
        target_ids.sort_unstable();
        target_ids.dedup();
        let matched: Vec<ResampledStreamline> = target_ids
            .iter()
            .map(|&id| targets[id as usize].clone())
            .collect();
        let fit = slr_fit(&moved, &matched, slr.kind, &Transform::identity(), &slr.optimizer)?;
        current = current.then(&fit.transform);
        iterations.push(IterationRecord {
            radius,
            matches: target_ids.len(),
            cost: fit.cost,
        });
    }

    let moved = transformed(&current);
    let pairs = brute_force_radius_search(&moved, targets, model.prune_radius);
    let mut best: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    for m in pairs {
        best.entry(m.target)
            .and_modify(|d| *d = d.min(m.distance))
            .or_insert(m.distance);
    }
    let mut selected_ids = Vec::with_capacity(best.len());
    let mut distances = Vec::with_capacity(best.len());
    for (id, d) in best {
        selected_ids.push(id);
        distances.push(d);
    }
    Ok(BundleResult {
        name: model.name.clone(),
        tractogram: provenance.to_string(),
        selected_ids,
        distances,
        final_transform: current,
        iterations,
        warning: None,
    })
}

/// Small deterministic RNG (xorshift64*) for test-suite randomness.
/// Not for anything but tests.
#[derive(Clone, Debug)]
pub struct TestRng {
    state: u64,
}

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: if seed == 0 { 0x9e3779b97f4a7c15 } else { seed },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545f4914f6cdd1d)
    }

    /// Uniform draw in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }
}
