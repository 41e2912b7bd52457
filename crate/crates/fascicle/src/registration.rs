//! Streamline-based linear registration: fit a rigid (optionally scaled or
//! affine) transform minimizing the bundle cost between a moving model and
//! matched subject streamlines.
//!
//! The optimizer is a deterministic coordinate pattern search with step
//! halving — no randomness anywhere, so repeated runs are bit-identical.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use thiserror::Error;

use crate::distance::{bundle_cost, DistanceError};
use crate::streamline::{GeometryError, ResampledStreamline, Transform, TransformKind};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("scale parameter must be positive, got {scale}")]
    NonPositiveScale { scale: f64 },
    #[error("{kind:?} transform expects {expected} parameters, got {got}")]
    InvalidParameterCount {
        kind: TransformKind,
        expected: usize,
        got: usize,
    },
    #[error("registration requires non-empty bundles")]
    EmptyBundle,
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Parameter vector for a transform of a given kind.
///
/// - rigid: `(tx, ty, tz)` in mm, `(rx, ry, rz)` intrinsic x-y-z rotations
///   in radians;
/// - rigid + scale: the rigid parameters followed by an isotropic scale;
/// - affine: the 12 entries of the upper 3x4 matrix block, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub values: Vec<f64>,
}

impl TransformParams {
    pub fn expected_len(kind: TransformKind) -> usize {
        match kind {
            TransformKind::Rigid => 6,
            TransformKind::RigidScale => 7,
            TransformKind::Affine => 12,
        }
    }

    /// Parameters mapping to the identity transform.
    pub fn identity(kind: TransformKind) -> Self {
        let values = match kind {
            TransformKind::Rigid => vec![0.0; 6],
            TransformKind::RigidScale => {
                let mut v = vec![0.0; 7];
                v[6] = 1.0;
                v
            }
            TransformKind::Affine => vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
        };
        Self { kind, values }
    }
}

/// Builds the homogeneous transform described by a parameter vector.
pub fn params_to_transform(params: &TransformParams) -> Result<Transform, RegistrationError> {
    let expected = TransformParams::expected_len(params.kind);
    if params.values.len() != expected {
        return Err(RegistrationError::InvalidParameterCount {
            kind: params.kind,
            expected,
            got: params.values.len(),
        });
    }
    let v = &params.values;
    let matrix = match params.kind {
        TransformKind::Rigid | TransformKind::RigidScale => {
            let rotation = Rotation3::from_axis_angle(&Vector3::x_axis(), v[3])
                * Rotation3::from_axis_angle(&Vector3::y_axis(), v[4])
                * Rotation3::from_axis_angle(&Vector3::z_axis(), v[5]);
            let scale = if params.kind == TransformKind::RigidScale {
                let s = v[6];
                if s <= 0.0 || s.is_nan() {
                    return Err(RegistrationError::NonPositiveScale { scale: s });
                }
                s
            } else {
                1.0
            };
            let linear: Matrix3<f64> = rotation.into_inner() * scale;
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
            m.fixed_view_mut::<3, 1>(0, 3)
                .copy_from(&Vector3::new(v[0], v[1], v[2]));
            m
        }
        TransformKind::Affine => {
            let mut m = Matrix4::identity();
            for row in 0..3 {
                for col in 0..4 {
                    m[(row, col)] = v[row * 4 + col];
                }
            }
            m
        }
    };
    Ok(Transform::new(matrix, params.kind)?)
}

/// Settings for the pattern-search optimizer. The step fields are the
/// initial per-parameter poll sizes; `convergence_tol` is the scale at
/// which shrinking steps stop mattering for a cost in millimetres.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub translation_step: f64,
    pub rotation_step: f64,
    pub scale_step: f64,
    pub convergence_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            translation_step: 2.0,
            rotation_step: 0.05,
            scale_step: 0.05,
            convergence_tol: 1e-4,
        }
    }
}

impl OptimizerConfig {
    /// Initial poll steps for each parameter of the given kind.
    pub fn parameter_steps(&self, kind: TransformKind) -> Vec<f64> {
        let t = self.translation_step;
        let r = self.rotation_step;
        let s = self.scale_step;
        match kind {
            TransformKind::Rigid => vec![t, t, t, r, r, r],
            TransformKind::RigidScale => vec![t, t, t, r, r, r, s],
            TransformKind::Affine => vec![
                s, s, s, t, //
                s, s, s, t, //
                s, s, s, t,
            ],
        }
    }
}

/// Result of a `minimize` run. On hitting the iteration cap the best
/// point so far is returned with `converged = false` — never an error.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeOutcome {
    pub params: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Derivative-free coordinate pattern search with step halving.
///
/// Polls `params[i] ± step[i]` in a fixed order and moves to the first
/// strict improvement; when no poll improves, all steps halve. Stops once
/// every step falls below `convergence_tol` or after `max_iterations`
/// polls. Fully deterministic, and the returned cost never exceeds the
/// cost at `init`.
pub fn minimize(
    cost_fn: impl Fn(&[f64]) -> f64,
    init: &[f64],
    initial_steps: &[f64],
    cfg: &OptimizerConfig,
) -> MinimizeOutcome {
    assert_eq!(init.len(), initial_steps.len());
    let mut best = init.to_vec();
    let mut best_cost = cost_fn(&best);
    let mut evaluations = 1;
    let mut steps = initial_steps.to_vec();
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        let mut improved = false;
        'poll: for i in 0..best.len() {
            for sign in [1.0, -1.0] {
                let mut candidate = best.clone();
                candidate[i] += sign * steps[i];
                let cost = cost_fn(&candidate);
                evaluations += 1;
                if cost < best_cost {
                    best = candidate;
                    best_cost = cost;
                    improved = true;
                    break 'poll;
                }
            }
        }
        if !improved {
            for s in &mut steps {
                *s *= 0.5;
            }
            if steps.iter().all(|s| *s < cfg.convergence_tol) {
                converged = true;
                break;
            }
        }
    }

    MinimizeOutcome {
        params: best,
        cost: best_cost,
        converged,
        evaluations,
    }
}

/// Transform kind and optimizer settings for registration passes.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SlrSettings {
    pub kind: TransformKind,
    pub optimizer: OptimizerConfig,
}

impl Default for SlrSettings {
    fn default() -> Self {
        Self {
            kind: TransformKind::Rigid,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Outcome of a streamline-based linear registration fit.
#[derive(Clone, Debug)]
pub struct SlrFit {
    /// The full transform (refinement composed onto `init`).
    pub transform: Transform,
    /// Bundle cost after registration, on the (possibly subsampled) sets.
    pub cost: f64,
    /// Bundle cost at `init` on the same sets.
    pub initial_cost: f64,
    pub converged: bool,
}

/// Cost evaluation is capped at this many streamlines per side; larger
/// bundles are subsampled by a stable stride to keep runs deterministic.
const MAX_COST_STREAMLINES: usize = 500;

fn stride_subsample(set: &[ResampledStreamline]) -> Vec<ResampledStreamline> {
    let stride = set.len().div_ceil(MAX_COST_STREAMLINES);
    set.iter().step_by(stride.max(1)).cloned().collect()
}

/// Fits a transform of `kind` minimizing the bundle cost between the
/// moving set and the fixed set, starting from `init`. The refinement is
/// parameterized around the moving bundle's centroid, so rotations pivot
/// on the bundle rather than the world origin. The returned cost is never
/// above the cost at `init`.
pub fn slr_fit(
    moving: &[ResampledStreamline],
    fixed: &[ResampledStreamline],
    kind: TransformKind,
    init: &Transform,
    cfg: &OptimizerConfig,
) -> Result<SlrFit, RegistrationError> {
    if moving.is_empty() || fixed.is_empty() {
        return Err(RegistrationError::EmptyBundle);
    }
    let moving_sub: Vec<ResampledStreamline> = stride_subsample(moving)
        .iter()
        .map(|s| s.transformed(init))
        .collect();
    let fixed_sub = stride_subsample(fixed);

    let mut center_sum = Vector3::zeros();
    let mut n_points = 0usize;
    for s in &moving_sub {
        for p in s.points() {
            center_sum += p.coords;
            n_points += 1;
        }
    }
    let center = center_sum / n_points as f64;
    let to_center = Transform::translation(center);
    let from_center = Transform::translation(-center);

    // refinement(params) = T_center ∘ delta(params) ∘ T_center^-1
    let refinement = |values: &[f64]| -> Option<Transform> {
        let delta = params_to_transform(&TransformParams {
            kind,
            values: values.to_vec(),
        })
        .ok()?;
        Some(from_center.then(&delta).then(&to_center))
    };

    let cost_fn = |values: &[f64]| -> f64 {
        let Some(t) = refinement(values) else {
            // Out-of-domain parameters (e.g. a non-positive scale) are
            // simply never an improvement.
            return f64::INFINITY;
        };
        let moved: Vec<ResampledStreamline> =
            moving_sub.iter().map(|s| s.transformed(&t)).collect();
        bundle_cost(&moved, &fixed_sub).expect("sets validated non-empty")
    };

    let identity = TransformParams::identity(kind);
    let steps = cfg.parameter_steps(kind);
    let initial_cost = bundle_cost(&moving_sub, &fixed_sub)?;
    let outcome = minimize(cost_fn, &identity.values, &steps, cfg);

    let refinement = refinement(&outcome.params).expect("optimizer result is in-domain");
    Ok(SlrFit {
        transform: init.then(&refinement),
        cost: outcome.cost,
        initial_cost,
        converged: outcome.converged,
    })
}
