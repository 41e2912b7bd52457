//! White matter bundle segmentation from whole-brain tractograms.
//!
//! The pipeline pairs an exact streamline radius search (no clustering, no
//! approximation) with iterative streamline-based linear registration:
//! bundle models are searched against an immutable index of the tractogram
//! at a decreasing radius schedule, re-registered to their matches after
//! each pass, and finally pruned at a single distance threshold. Everything
//! is deterministic — two runs on identical inputs produce byte-identical
//! outputs.
//!
//! Modules:
//! - [`streamline`]: polyline data model, arc-length resampling, transforms
//! - [`distance`]: MDF streamline distance, pruning bounds, bundle cost
//! - [`search`]: exact MDF radius queries over a space-partitioning index
//! - [`registration`]: derivative-free rigid/affine fitting (SLR)
//! - [`segmentation`]: the iterative search/register/prune procedure
//! - [`metrics`]: voxel masks, Dice, adjacency, reproducibility reports
//! - [`io`]: TCK tractogram files, atlas configs, result reports
//! - [`synth`]: deterministic synthetic bundle generator

pub mod distance;
pub mod io;
pub mod metrics;
pub mod registration;
pub mod search;
pub mod segmentation;
pub mod streamline;
pub mod synth;

#[cfg(any(test, feature = "reference"))]
pub mod reference;

pub use streamline::{
    GeometryError, ResampledStreamline, Streamline, Tractogram, Transform, TransformKind,
};
