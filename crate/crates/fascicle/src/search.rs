//! Exact radius search over streamlines under the MDF distance.
//!
//! A space-partitioning tree over the flattened point coordinates of both
//! orientations of every streamline replaces all-pairs comparison. Pruning
//! uses two sound lower bounds on the direct distance — the centroid
//! distance and the flattened-coordinate norm divided by m — so the result
//! set is always identical to brute-force thresholding, regardless of tree
//! quality. Tree shape only affects speed.

use std::collections::BTreeMap;

use nalgebra::Point3;
use rayon::prelude::*;
use thiserror::Error;

use crate::distance::direct_sum_with_cutoff;
use crate::streamline::{GeometryError, ResampledStreamline, Tractogram};

const LEAF_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("cannot build an index over an empty tractogram")]
    EmptyTractogram,
    #[error("index requires at least 2 points per streamline, got {requested}")]
    InvalidPointCount { requested: usize },
    #[error("query has {query} points but the index was built with {index}")]
    PointCountMismatch { index: usize, query: usize },
    #[error("search radius must be positive and finite, got {radius}")]
    InvalidRadius { radius: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug)]
struct Node {
    cent_lo: [f64; 3],
    cent_hi: [f64; 3],
    /// Leaf: first entry position. Internal: unused.
    start: u32,
    /// Leaf: entry count (> 0). Internal: 0.
    count: u32,
    /// Internal: right child index (left child is `self + 1`). Leaf: unused.
    right: u32,
}

/// Immutable index over all streamlines of a tractogram, resampled to a
/// fixed point count and inserted in both orientations (one entry only for
/// palindromic streamlines). Safe to share across threads for concurrent
/// queries.
pub struct FssIndex {
    m: usize,
    provenance: String,
    n_streamlines: u32,
    /// Entry-major point storage: entry `e` is `points[e*m .. (e+1)*m]`.
    points: Vec<Point3<f64>>,
    centroids: Vec<Point3<f64>>,
    source_ids: Vec<u32>,
    reversed: Vec<bool>,
    /// Source streamline ID -> entry holding its direct orientation.
    direct_entry: Vec<u32>,
    nodes: Vec<Node>,
    /// Per-node flattened bounding boxes, `3m` values per node.
    flat_lo: Vec<f64>,
    flat_hi: Vec<f64>,
}

/// One query/target pair with its exact MDF distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub query: u32,
    pub target: u32,
    pub distance: f64,
}

/// Result of a radius search: every (query, target) pair with MDF within
/// the radius, each reported once with its exact distance, sorted by
/// (query, target).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    matches: Vec<Match>,
}

impl MatchSet {
    pub fn matches(&self) -> &[Match] {
        &self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// For each matched target, the minimum distance over all queries.
    pub fn min_distance_map(&self) -> BTreeMap<u32, f64> {
        let mut map = BTreeMap::new();
        for m in &self.matches {
            map.entry(m.target)
                .and_modify(|d: &mut f64| *d = d.min(m.distance))
                .or_insert(m.distance);
        }
        map
    }

    /// Sorted, duplicate-free list of matched target IDs.
    pub fn target_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.matches.iter().map(|m| m.target).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Builds the search index over every streamline of `tractogram`,
/// resampled to `m` points. Deterministic: identical input yields an
/// identical structure.
pub fn build_index(tractogram: &Tractogram, m: usize) -> Result<FssIndex, SearchError> {
    if tractogram.is_empty() {
        return Err(SearchError::EmptyTractogram);
    }
    if m < 2 {
        return Err(SearchError::InvalidPointCount { requested: m });
    }
    debug_assert!(tractogram.len() <= u32::MAX as usize);

    let resampled = tractogram.resample_all(m)?;

    // Raw entries in deterministic order: direct then flipped per source.
    let mut raw_points: Vec<Point3<f64>> = Vec::with_capacity(resampled.len() * 2 * m);
    let mut raw_source: Vec<u32> = Vec::with_capacity(resampled.len() * 2);
    let mut raw_reversed: Vec<bool> = Vec::with_capacity(resampled.len() * 2);
    for (id, s) in resampled.iter().enumerate() {
        raw_points.extend_from_slice(s.points());
        raw_source.push(id as u32);
        raw_reversed.push(false);
        let flipped = s.flipped();
        if flipped.points() != s.points() {
            raw_points.extend_from_slice(flipped.points());
            raw_source.push(id as u32);
            raw_reversed.push(true);
        }
    }
    let n_entries = raw_source.len();

    let raw_centroids: Vec<Point3<f64>> = (0..n_entries)
        .map(|e| {
            let pts = &raw_points[e * m..(e + 1) * m];
            let mut sum = nalgebra::Vector3::zeros();
            for p in pts {
                sum += p.coords;
            }
            Point3::from(sum / m as f64)
        })
        .collect();

    let mut order: Vec<u32> = (0..n_entries as u32).collect();
    let mut builder = TreeBuilder {
        m,
        raw_points: &raw_points,
        raw_centroids: &raw_centroids,
        nodes: Vec::new(),
        flat_lo: Vec::new(),
        flat_hi: Vec::new(),
    };
    builder.build(&mut order, 0);
    let TreeBuilder {
        nodes,
        flat_lo,
        flat_hi,
        ..
    } = builder;

    // Gather entry storage in leaf-contiguous order.
    let mut points = Vec::with_capacity(n_entries * m);
    let mut centroids = Vec::with_capacity(n_entries);
    let mut source_ids = Vec::with_capacity(n_entries);
    let mut reversed = Vec::with_capacity(n_entries);
    let mut direct_entry = vec![0u32; tractogram.len()];
    for (e_new, &e_raw) in order.iter().enumerate() {
        let e_raw = e_raw as usize;
        points.extend_from_slice(&raw_points[e_raw * m..(e_raw + 1) * m]);
        centroids.push(raw_centroids[e_raw]);
        source_ids.push(raw_source[e_raw]);
        reversed.push(raw_reversed[e_raw]);
        if !raw_reversed[e_raw] {
            direct_entry[raw_source[e_raw] as usize] = e_new as u32;
        }
    }

    Ok(FssIndex {
        m,
        provenance: tractogram.provenance().to_string(),
        n_streamlines: tractogram.len() as u32,
        points,
        centroids,
        source_ids,
        reversed,
        direct_entry,
        nodes,
        flat_lo,
        flat_hi,
    })
}

struct TreeBuilder<'a> {
    m: usize,
    raw_points: &'a [Point3<f64>],
    raw_centroids: &'a [Point3<f64>],
    nodes: Vec<Node>,
    flat_lo: Vec<f64>,
    flat_hi: Vec<f64>,
}

impl TreeBuilder<'_> {
    /// Builds the subtree over `slice` (entry IDs, reordered in place so
    /// leaves are contiguous ranges at `offset`). Returns the node index.
    fn build(&mut self, slice: &mut [u32], offset: usize) -> u32 {
        let dims = 3 * self.m;
        let mut flat_lo = vec![f64::INFINITY; dims];
        let mut flat_hi = vec![f64::NEG_INFINITY; dims];
        let mut cent_lo = [f64::INFINITY; 3];
        let mut cent_hi = [f64::NEG_INFINITY; 3];
        for &e in slice.iter() {
            let e = e as usize;
            let pts = &self.raw_points[e * self.m..(e + 1) * self.m];
            for (j, p) in pts.iter().enumerate() {
                for axis in 0..3 {
                    let d = j * 3 + axis;
                    flat_lo[d] = flat_lo[d].min(p[axis]);
                    flat_hi[d] = flat_hi[d].max(p[axis]);
                }
            }
            let c = &self.raw_centroids[e];
            for axis in 0..3 {
                cent_lo[axis] = cent_lo[axis].min(c[axis]);
                cent_hi[axis] = cent_hi[axis].max(c[axis]);
            }
        }

        let node_id = self.nodes.len() as u32;
        self.nodes.push(Node {
            cent_lo,
            cent_hi,
            start: offset as u32,
            count: slice.len() as u32,
            right: 0,
        });
        self.flat_lo.extend_from_slice(&flat_lo);
        self.flat_hi.extend_from_slice(&flat_hi);

        if slice.len() <= LEAF_SIZE {
            return node_id;
        }

        // Split on the flattened coordinate with the largest spread,
        // lowest dimension on ties; median split keeps the tree balanced.
        let mut split_dim = 0;
        let mut best_spread = f64::NEG_INFINITY;
        for d in 0..dims {
            let spread = flat_hi[d] - flat_lo[d];
            if spread > best_spread {
                best_spread = spread;
                split_dim = d;
            }
        }
        let (pt, axis) = (split_dim / 3, split_dim % 3);
        slice.sort_unstable_by(|&a, &b| {
            let va = self.raw_points[a as usize * self.m + pt][axis];
            let vb = self.raw_points[b as usize * self.m + pt][axis];
            va.total_cmp(&vb).then(a.cmp(&b))
        });
        let mid = slice.len() / 2;

        self.nodes[node_id as usize].count = 0;
        let (left, right) = slice.split_at_mut(mid);
        self.build(left, offset);
        let right_id = self.build(right, offset + mid);
        self.nodes[node_id as usize].right = right_id;
        node_id
    }
}

impl FssIndex {
    /// Point count every entry (and every query) is resampled to.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Provenance of the indexed tractogram.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Number of source streamlines.
    pub fn len(&self) -> usize {
        self.n_streamlines as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n_streamlines == 0
    }

    /// Number of oriented entries (2 per streamline, 1 if palindromic).
    pub fn entry_count(&self) -> usize {
        self.source_ids.len()
    }

    /// The direct-orientation resampled streamline for a source ID.
    pub fn source_streamline(&self, id: u32) -> ResampledStreamline {
        let e = self.direct_entry[id as usize] as usize;
        ResampledStreamline::from_points(self.points[e * self.m..(e + 1) * self.m].to_vec())
    }

    /// Finds every (query, target) pair with exact MDF within `radius`.
    ///
    /// The result is identical to brute-force all-pairs thresholding; the
    /// two orientation entries of a target collapse to one pair with the
    /// minimum (= exact MDF) distance. Queries may run in parallel; the
    /// output order is independent of scheduling.
    pub fn radius_search(
        &self,
        queries: &[ResampledStreamline],
        radius: f64,
    ) -> Result<MatchSet, SearchError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(SearchError::InvalidRadius { radius });
        }
        for q in queries {
            if q.num_points() != self.m {
                return Err(SearchError::PointCountMismatch {
                    index: self.m,
                    query: q.num_points(),
                });
            }
        }
        let per_query: Vec<Vec<(u32, f64)>> = queries
            .par_iter()
            .map(|q| self.search_one(q, radius))
            .collect();
        let mut matches = Vec::new();
        for (query, hits) in per_query.into_iter().enumerate() {
            matches.extend(hits.into_iter().map(|(target, distance)| Match {
                query: query as u32,
                target,
                distance,
            }));
        }
        Ok(MatchSet { matches })
    }

    /// Collects `(target, exact MDF)` pairs for one query, sorted by
    /// target ID.
    fn search_one(&self, query: &ResampledStreamline, radius: f64) -> Vec<(u32, f64)> {
        let m = self.m;
        let qpts = query.points();
        let qc = query.centroid();
        let radius2 = radius * radius;
        // Necessary condition for a direct distance within the radius:
        // ||flat(u) - flat(w)|| <= m * radius.
        let flat_cut2 = (m as f64 * radius) * (m as f64 * radius);
        let cutoff_sum = m as f64 * radius;

        let mut hits: Vec<(u32, f64)> = Vec::new();
        let mut stack: Vec<u32> = vec![0];
        while let Some(node_id) = stack.pop() {
            let node = &self.nodes[node_id as usize];
            if self.centroid_box_excess2(&qc, node) > radius2 {
                continue;
            }
            if self.flat_box_excess2(qpts, node_id as usize, flat_cut2) > flat_cut2 {
                continue;
            }
            if node.count > 0 {
                let start = node.start as usize;
                for e in start..start + node.count as usize {
                    if (qc - self.centroids[e]).norm_squared() > radius2 {
                        continue;
                    }
                    let epts = &self.points[e * m..(e + 1) * m];
                    // Flattened-coordinate bound, accumulated with an
                    // early exit.
                    let mut flat2 = 0.0;
                    for (qp, ep) in qpts.iter().zip(epts) {
                        flat2 += (qp - ep).norm_squared();
                        if flat2 > flat_cut2 {
                            break;
                        }
                    }
                    if flat2 > flat_cut2 {
                        continue;
                    }
                    // Exact verification with early abandonment.
                    if let Some(d) = direct_sum_with_cutoff(qpts, epts, false, cutoff_sum) {
                        hits.push((self.source_ids[e], d));
                    }
                }
            } else {
                stack.push(node_id + 1);
                stack.push(node.right);
            }
        }

        // Collapse the two orientation entries of a target to the minimum
        // (= exact MDF) distance.
        hits.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        hits.dedup_by_key(|h| h.0);
        hits
    }

    /// Squared distance from the query centroid to the node's centroid
    /// bounding box (0 inside).
    #[inline]
    fn centroid_box_excess2(&self, qc: &Point3<f64>, node: &Node) -> f64 {
        let mut d2 = 0.0;
        for axis in 0..3 {
            let v = qc[axis];
            let excess = (node.cent_lo[axis] - v).max(v - node.cent_hi[axis]).max(0.0);
            d2 += excess * excess;
        }
        d2
    }

    /// Squared distance from the flattened query to the node's flattened
    /// bounding box, with an early exit once `cut2` is exceeded.
    #[inline]
    fn flat_box_excess2(&self, qpts: &[Point3<f64>], node_id: usize, cut2: f64) -> f64 {
        let dims = 3 * self.m;
        let lo = &self.flat_lo[node_id * dims..(node_id + 1) * dims];
        let hi = &self.flat_hi[node_id * dims..(node_id + 1) * dims];
        let mut d2 = 0.0;
        for (j, p) in qpts.iter().enumerate() {
            for axis in 0..3 {
                let d = j * 3 + axis;
                let v = p[axis];
                let excess = (lo[d] - v).max(v - hi[d]).max(0.0);
                d2 += excess * excess;
            }
            if d2 > cut2 {
                return d2;
            }
        }
        d2
    }

    /// Canonical byte serialization of the full index structure, for
    /// determinism checks. The index is rebuilt per run, never persisted.
    pub fn structure_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.m as u64).to_le_bytes());
        out.extend_from_slice(&self.n_streamlines.to_le_bytes());
        out.extend_from_slice(&(self.source_ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        for (e, (&id, &rev)) in self.source_ids.iter().zip(&self.reversed).enumerate() {
            out.extend_from_slice(&id.to_le_bytes());
            out.push(rev as u8);
            for p in &self.points[e * self.m..(e + 1) * self.m] {
                for axis in 0..3 {
                    out.extend_from_slice(&p[axis].to_bits().to_le_bytes());
                }
            }
        }
        for (n, node) in self.nodes.iter().enumerate() {
            out.extend_from_slice(&node.start.to_le_bytes());
            out.extend_from_slice(&node.count.to_le_bytes());
            out.extend_from_slice(&node.right.to_le_bytes());
            for axis in 0..3 {
                out.extend_from_slice(&node.cent_lo[axis].to_bits().to_le_bytes());
                out.extend_from_slice(&node.cent_hi[axis].to_bits().to_le_bytes());
            }
            let dims = 3 * self.m;
            for d in 0..dims {
                out.extend_from_slice(&self.flat_lo[n * dims + d].to_bits().to_le_bytes());
                out.extend_from_slice(&self.flat_hi[n * dims + d].to_bits().to_le_bytes());
            }
        }
        out
    }
}
