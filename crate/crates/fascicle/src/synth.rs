//! Deterministic synthetic bundle and tractogram generation.
//!
//! Every coordinate derives from a counter-based pseudo-random function
//! keyed by (seed, streamline index, point index, channel), so output is
//! identical regardless of generation order or thread count, and adding
//! more streamlines never perturbs existing ones.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streamline::{Streamline, Tractogram};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

/// Centerline family of a synthetic bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Straight segment of length `radius_mm` along x.
    Straight,
    /// Circular arc of radius `radius_mm` spanning `span_degrees` in the
    /// xy-plane.
    Arc,
    /// Helix of radius `radius_mm`, angular span `span_degrees`, rising
    /// `pitch_mm` per full turn.
    Helix,
}

/// Full description of one synthetic bundle. Generation is a pure
/// function of this value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub family: Family,
    pub n_streamlines: usize,
    /// Points sampled along each centerline before any resampling.
    pub n_points: usize,
    pub radius_mm: f64,
    pub span_degrees: f64,
    pub pitch_mm: f64,
    /// Standard deviation of each streamline's constant offset from the
    /// centerline.
    pub dispersion_mm: f64,
    /// Standard deviation of independent per-point jitter.
    pub point_noise_mm: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_streamlines < 1 {
            return Err(SynthError::InvalidSpec("n_streamlines must be >= 1".into()));
        }
        if self.n_points < 2 {
            return Err(SynthError::InvalidSpec("n_points must be >= 2".into()));
        }
        if self.radius_mm <= 0.0 || !self.radius_mm.is_finite() {
            return Err(SynthError::InvalidSpec("radius_mm must be > 0".into()));
        }
        if self.dispersion_mm < 0.0 || self.point_noise_mm < 0.0 {
            return Err(SynthError::InvalidSpec("noise sigmas must be >= 0".into()));
        }
        if matches!(self.family, Family::Arc | Family::Helix)
            && (self.span_degrees <= 0.0 || !self.span_degrees.is_finite())
        {
            return Err(SynthError::InvalidSpec(
                "span_degrees must be > 0 for arc and helix families".into(),
            ));
        }
        Ok(())
    }

    fn centerline_at(&self, t: f64) -> Point3<f64> {
        match self.family {
            Family::Straight => Point3::new(self.radius_mm * t, 0.0, 0.0),
            Family::Arc => {
                let angle = self.span_degrees.to_radians() * t;
                Point3::new(self.radius_mm * angle.cos(), self.radius_mm * angle.sin(), 0.0)
            }
            Family::Helix => {
                let angle = self.span_degrees.to_radians() * t;
                Point3::new(
                    self.radius_mm * angle.cos(),
                    self.radius_mm * angle.sin(),
                    self.pitch_mm * angle / std::f64::consts::TAU,
                )
            }
        }
    }
}

/// splitmix64 finalizer: a well-mixed pure function of a 64-bit key.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn keyed(seed: u64, stream: u64, point: u64, channel: u64) -> u64 {
    mix(mix(mix(mix(seed) ^ stream) ^ point) ^ channel)
}

/// Uniform draw in (0, 1].
fn uniform(seed: u64, stream: u64, point: u64, channel: u64) -> f64 {
    (((keyed(seed, stream, point, channel) >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
}

/// Standard gaussian via Box-Muller; consumes channels `2c` and `2c + 1`.
fn gaussian(seed: u64, stream: u64, point: u64, channel: u64) -> f64 {
    let u1 = uniform(seed, stream, point, 2 * channel);
    let u2 = uniform(seed, stream, point, 2 * channel + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Point index reserved for per-streamline draws (the constant offset).
const STREAM_DRAW: u64 = u64::MAX;

/// Generates the tractogram described by `spec`. Each streamline is the
/// centerline shifted by a constant gaussian offset plus independent
/// per-point jitter.
pub fn generate(spec: &SynthSpec) -> Result<Tractogram, SynthError> {
    spec.validate()?;
    let streamlines = (0..spec.n_streamlines)
        .map(|i| generate_streamline(spec, i as u64, Vector3::zeros()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tractogram::from_streamlines(streamlines, "synthetic"))
}

fn generate_streamline(
    spec: &SynthSpec,
    stream: u64,
    world_offset: Vector3<f64>,
) -> Result<Streamline, SynthError> {
    let offset = Vector3::new(
        gaussian(spec.seed, stream, STREAM_DRAW, 0),
        gaussian(spec.seed, stream, STREAM_DRAW, 1),
        gaussian(spec.seed, stream, STREAM_DRAW, 2),
    ) * spec.dispersion_mm;
    let points: Vec<Point3<f64>> = (0..spec.n_points)
        .map(|j| {
            let t = j as f64 / (spec.n_points - 1) as f64;
            let noise = Vector3::new(
                gaussian(spec.seed, stream, j as u64, 0),
                gaussian(spec.seed, stream, j as u64, 1),
                gaussian(spec.seed, stream, j as u64, 2),
            ) * spec.point_noise_mm;
            spec.centerline_at(t) + offset + noise + world_offset
        })
        .collect();
    Streamline::new(points)
        .map_err(|e| SynthError::InvalidSpec(format!("generated degenerate streamline: {e}")))
}

/// The ID partition of a composed scene: one sorted ID list per bundle,
/// plus the decoy IDs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SceneIds {
    pub bundles: Vec<Vec<u32>>,
    pub decoys: Vec<u32>,
}

/// Concatenates the given bundles (each shifted by its world offset) and
/// optional decoy streamlines into one tractogram, returning the
/// ground-truth ID partition. Bundle coordinates do not depend on the
/// presence of decoys or other bundles.
pub fn compose_scene(
    bundles: &[(SynthSpec, Vector3<f64>)],
    decoys: Option<&SynthSpec>,
) -> Result<(Tractogram, SceneIds), SynthError> {
    let mut streamlines = Vec::new();
    let mut ids = SceneIds::default();
    for (spec, offset) in bundles {
        spec.validate()?;
        let start = streamlines.len() as u32;
        for i in 0..spec.n_streamlines {
            streamlines.push(generate_streamline(spec, i as u64, *offset)?);
        }
        ids.bundles.push((start..streamlines.len() as u32).collect());
    }
    if let Some(spec) = decoys {
        spec.validate()?;
        let start = streamlines.len() as u32;
        for i in 0..spec.n_streamlines {
            streamlines.push(generate_streamline(spec, i as u64, Vector3::zeros())?);
        }
        ids.decoys = (start..streamlines.len() as u32).collect();
    }
    Ok((
        Tractogram::from_streamlines(streamlines, "synthetic"),
        ids,
    ))
}
