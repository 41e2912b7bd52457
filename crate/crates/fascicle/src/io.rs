//! File formats: TCK tractogram read/write (bit-exact), atlas
//! configuration, synthetic scene specs, and result/report documents.
//!
//! All geometry is double precision internally and Float32 on disk, per
//! the tracks format convention. Report floats are rounded to 6
//! significant digits so identical runs produce byte-identical, diffable
//! documents.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::ComparisonReport;
use crate::registration::SlrSettings;
use crate::segmentation::{BundleResult, IterationRecord};
use crate::streamline::{GeometryError, Tractogram, Transform, TransformKind};
use crate::synth::{Family, SynthSpec};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a tracks file (header must start with 'mrtrix tracks')")]
    BadMagic { path: String },
    #[error("{path}: missing required header field '{field}'")]
    MissingHeaderField { path: String, field: &'static str },
    #[error("{path}: unsupported datatype '{datatype}' (only Float32LE is supported)")]
    UnsupportedDatatype { path: String, datatype: String },
    #[error("{path}: malformed header: {detail}")]
    BadHeader { path: String, detail: String },
    #[error("{path}: payload truncated at byte {offset} (incomplete coordinate triplet)")]
    TruncatedPayload { path: String, offset: usize },
    #[error("{path}: end-of-file triplet (Inf, Inf, Inf) missing; payload ends at byte {offset}")]
    MissingTerminator { path: String, offset: usize },
    #[error("{path}: invalid coordinate triplet at byte {offset}")]
    InvalidTriplet { path: String, offset: usize },
    #[error("{path}: {source}")]
    Streamlines {
        path: String,
        source: GeometryError,
    },
    #[error("{path}: {detail}")]
    Config { path: String, detail: String },
    #[error("{path}: {source}")]
    Toml {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------------------
// TCK tractogram files
// ---------------------------------------------------------------------------

/// A parsed tracks file: the tractogram plus non-fatal warnings (for
/// example a `count` header that disagrees with the parsed content).
#[derive(Debug)]
pub struct TckFile {
    pub tractogram: Tractogram,
    pub warnings: Vec<String>,
}

/// Reads a tracks file: a text header opened by the magic line
/// `mrtrix tracks`, `key: value` lines including `datatype: Float32LE`
/// and `file: . <offset>`, closed by `END`; then little-endian Float32
/// (x, y, z) triplets at the byte offset, one NaN triplet terminating
/// each streamline and one Inf triplet terminating the file.
pub fn read_tck(path: &Path) -> Result<TckFile, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::Read {
        path: path_str(path),
        source,
    })?;
    let p = path_str(path);

    if !bytes.starts_with(b"mrtrix tracks") {
        return Err(IoError::BadMagic { path: p });
    }
    let mut datatype: Option<String> = None;
    let mut offset: Option<usize> = None;
    let mut declared_count: Option<u64> = None;
    let mut line_start = 0usize;
    let mut saw_end = false;
    let mut first = true;
    while line_start < bytes.len() {
        let line_end = bytes[line_start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| line_start + i)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[line_start..line_end]);
        let line = line.trim_end_matches('\r');
        line_start = line_end + 1;
        if first {
            first = false;
            continue; // the magic line
        }
        if line == "END" {
            saw_end = true;
            break;
        }
        if let Some((key, value)) = line.split_once(':') {
            let value = value.trim();
            match key.trim() {
                "datatype" => datatype = Some(value.to_string()),
                "count" => {
                    declared_count = Some(value.parse().map_err(|_| IoError::BadHeader {
                        path: p.clone(),
                        detail: format!("unparsable count '{value}'"),
                    })?)
                }
                "file" => {
                    let rest = value.strip_prefix(". ").ok_or_else(|| IoError::BadHeader {
                        path: p.clone(),
                        detail: format!("'file' must be '. <offset>', got '{value}'"),
                    })?;
                    offset = Some(rest.trim().parse().map_err(|_| IoError::BadHeader {
                        path: p.clone(),
                        detail: format!("unparsable file offset '{rest}'"),
                    })?);
                }
                _ => {}
            }
        }
    }
    if !saw_end {
        return Err(IoError::BadHeader {
            path: p,
            detail: "header is not terminated by an END line".into(),
        });
    }
    let datatype = datatype.ok_or_else(|| IoError::MissingHeaderField {
        path: p.clone(),
        field: "datatype",
    })?;
    if datatype != "Float32LE" {
        return Err(IoError::UnsupportedDatatype { path: p, datatype });
    }
    let offset = offset.ok_or_else(|| IoError::MissingHeaderField {
        path: p.clone(),
        field: "file",
    })?;
    if offset > bytes.len() {
        return Err(IoError::BadHeader {
            path: p,
            detail: format!("file offset {offset} is past the end of the file"),
        });
    }

    let mut raw: Vec<Vec<Point3<f64>>> = Vec::new();
    let mut current: Vec<Point3<f64>> = Vec::new();
    let mut pos = offset;
    let mut terminated = false;
    while !terminated {
        if pos + 12 > bytes.len() {
            return Err(if pos == bytes.len() {
                IoError::MissingTerminator { path: p, offset: pos }
            } else {
                IoError::TruncatedPayload { path: p, offset: pos }
            });
        }
        let mut v = [0f32; 3];
        for (i, value) in v.iter_mut().enumerate() {
            let at = pos + i * 4;
            *value = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
        pos += 12;
        if v.iter().all(|x| x.is_nan()) {
            if !current.is_empty() {
                raw.push(std::mem::take(&mut current));
            }
        } else if v.iter().all(|x| x.is_infinite() && x.is_sign_positive()) {
            if !current.is_empty() {
                raw.push(std::mem::take(&mut current));
            }
            terminated = true;
        } else if v.iter().all(|x| x.is_finite()) {
            current.push(Point3::new(v[0] as f64, v[1] as f64, v[2] as f64));
        } else {
            return Err(IoError::InvalidTriplet { path: p, offset: pos - 12 });
        }
    }

    let mut warnings = Vec::new();
    if let Some(declared) = declared_count {
        if declared != raw.len() as u64 {
            warnings.push(format!(
                "{p}: header declares {declared} streamlines but payload holds {}",
                raw.len()
            ));
        }
    }
    let tractogram =
        Tractogram::new(raw, p.clone()).map_err(|source| IoError::Streamlines { path: p, source })?;
    Ok(TckFile {
        tractogram,
        warnings,
    })
}

/// Coordinates above Float32 integer precision lose sub-millimetre
/// accuracy on write; flagged with a warning.
const LOSSY_F32_LIMIT: f64 = 16_777_216.0; // 2^24

/// Writes a tracks file as described at [`read_tck`]. Output bytes are a
/// pure function of the tractogram. Returns non-fatal warnings (lossy
/// Float32 conversion of very large coordinates).
pub fn write_tck(tractogram: &Tractogram, path: &Path) -> Result<Vec<String>, IoError> {
    // The offset names the header length, which depends on the offset's
    // own digit count; iterate to the fixed point.
    let count = tractogram.len();
    let header_len = |offset: usize| {
        format!("mrtrix tracks\ndatatype: Float32LE\ncount: {count}\nfile: . {offset}\nEND\n")
            .len()
    };
    let mut offset = header_len(0);
    while header_len(offset) != offset {
        offset = header_len(offset);
    }
    let header =
        format!("mrtrix tracks\ndatatype: Float32LE\ncount: {count}\nfile: . {offset}\nEND\n");
    debug_assert_eq!(header.len(), offset);

    let n_points: usize = tractogram.streamlines().iter().map(|s| s.num_points()).sum();
    let mut bytes = Vec::with_capacity(offset + (n_points + count + 1) * 12);
    bytes.extend_from_slice(header.as_bytes());

    let mut lossy = 0usize;
    let push = |v: [f32; 3], bytes: &mut Vec<u8>| {
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    };
    for s in tractogram.streamlines() {
        for point in s.points() {
            for axis in 0..3 {
                if point[axis].abs() > LOSSY_F32_LIMIT {
                    lossy += 1;
                }
            }
            push(
                [point.x as f32, point.y as f32, point.z as f32],
                &mut bytes,
            );
        }
        push([f32::NAN; 3], &mut bytes);
    }
    push([f32::INFINITY; 3], &mut bytes);

    fs::write(path, &bytes).map_err(|source| IoError::Write {
        path: path_str(path),
        source,
    })?;
    let mut warnings = Vec::new();
    if lossy > 0 {
        warnings.push(format!(
            "{}: {lossy} coordinates exceed Float32 integer precision (|x| > 2^24); \
             written values are rounded",
            path_str(path)
        ));
    }
    Ok(warnings)
}

// ---------------------------------------------------------------------------
// Atlas configuration
// ---------------------------------------------------------------------------

/// One bundle entry of a validated atlas configuration.
#[derive(Clone, Debug)]
pub struct BundleEntry {
    pub name: String,
    /// Absolute-or-config-relative model path, resolved.
    pub model_file: PathBuf,
    pub prune_radius_mm: f64,
    pub schedule_steps: usize,
    pub start_factor: f64,
}

/// Validated atlas configuration.
#[derive(Clone, Debug)]
pub struct AtlasConfig {
    pub resample_points: usize,
    pub voxel_size_mm: f64,
    pub registration: SlrSettings,
    /// Pre-computed coarse alignment from model (atlas) space toward
    /// subject space; identity when inputs are already aligned.
    pub global_affine: Transform,
    pub bundles: Vec<BundleEntry>,
}

/// On-disk (TOML) shape of the atlas configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub resample_points: usize,
    pub voxel_size_mm: f64,
    pub registration: SlrSettings,
    /// Row-major 16-value 4x4 matrix; identity when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_affine: Option<Vec<f64>>,
    #[serde(rename = "bundle")]
    pub bundles: Vec<ConfigBundle>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            resample_points: 32,
            voxel_size_mm: 1.0,
            registration: SlrSettings::default(),
            global_affine: None,
            bundles: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigBundle {
    pub name: String,
    pub model: PathBuf,
    pub prune_radius_mm: f64,
    #[serde(default = "default_schedule_steps")]
    pub schedule_steps: usize,
    #[serde(default = "default_start_factor")]
    pub start_factor: f64,
}

fn default_schedule_steps() -> usize {
    3
}

fn default_start_factor() -> f64 {
    2.0
}

/// Loads and validates an atlas configuration. Model paths resolve
/// relative to the config file's directory and must exist.
pub fn load_config(path: &Path) -> Result<AtlasConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path_str(path),
        source,
    })?;
    let file: ConfigFile = toml::from_str(&text).map_err(|source| IoError::Toml {
        path: path_str(path),
        source: Box::new(source),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate_config(file, base).map_err(|detail| IoError::Config {
        path: path_str(path),
        detail,
    })
}

fn validate_config(file: ConfigFile, base: &Path) -> Result<AtlasConfig, String> {
    if file.resample_points < 2 {
        return Err(format!(
            "resample_points must be at least 2, got {}",
            file.resample_points
        ));
    }
    if file.voxel_size_mm <= 0.0 || !file.voxel_size_mm.is_finite() {
        return Err(format!(
            "voxel_size_mm must be positive, got {}",
            file.voxel_size_mm
        ));
    }
    let opt = &file.registration.optimizer;
    if !(opt.translation_step > 0.0
        && opt.rotation_step > 0.0
        && opt.scale_step > 0.0
        && opt.convergence_tol > 0.0
        && opt.max_iterations > 0)
    {
        return Err("registration optimizer settings must all be positive".into());
    }
    let global_affine = match &file.global_affine {
        None => Transform::identity(),
        Some(values) => {
            if values.len() != 16 {
                return Err(format!(
                    "global_affine must hold 16 row-major values, got {}",
                    values.len()
                ));
            }
            let mut rows = [[0.0; 4]; 4];
            for (i, v) in values.iter().enumerate() {
                rows[i / 4][i % 4] = *v;
            }
            Transform::from_rows(rows, TransformKind::Affine)
                .map_err(|e| format!("global_affine: {e}"))?
        }
    };
    if file.bundles.is_empty() {
        return Err("config declares no bundles".into());
    }
    let mut bundles = Vec::with_capacity(file.bundles.len());
    let mut seen = std::collections::BTreeSet::new();
    for b in &file.bundles {
        if b.name.is_empty() || b.name.contains(['/', '\\']) {
            return Err(format!("bundle name '{}' is not a valid file stem", b.name));
        }
        if !seen.insert(b.name.clone()) {
            return Err(format!("duplicate bundle name '{}'", b.name));
        }
        if b.prune_radius_mm <= 0.0 || !b.prune_radius_mm.is_finite() {
            return Err(format!(
                "bundle '{}': prune_radius_mm must be positive, got {}",
                b.name, b.prune_radius_mm
            ));
        }
        if b.schedule_steps < 1 {
            return Err(format!("bundle '{}': schedule_steps must be at least 1", b.name));
        }
        if b.start_factor < 1.0 || b.start_factor.is_nan() {
            return Err(format!(
                "bundle '{}': start_factor must be at least 1, got {}",
                b.name, b.start_factor
            ));
        }
        let model_file = base.join(&b.model);
        if !model_file.is_file() {
            return Err(format!(
                "bundle '{}': model file {} does not exist",
                b.name,
                model_file.display()
            ));
        }
        bundles.push(BundleEntry {
            name: b.name.clone(),
            model_file,
            prune_radius_mm: b.prune_radius_mm,
            schedule_steps: b.schedule_steps,
            start_factor: b.start_factor,
        });
    }
    Ok(AtlasConfig {
        resample_points: file.resample_points,
        voxel_size_mm: file.voxel_size_mm,
        registration: file.registration,
        global_affine,
        bundles,
    })
}

// ---------------------------------------------------------------------------
// Synthetic scene specs
// ---------------------------------------------------------------------------

/// On-disk (TOML) description of a synthetic scene: named bundles at
/// world offsets plus optional decoy streamlines.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpecFile {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(rename = "bundle")]
    pub bundles: Vec<SceneBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoys: Option<SceneGenerator>,
}

fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBundle {
    pub name: String,
    #[serde(flatten)]
    pub generator: SceneGenerator,
    #[serde(default)]
    pub offset_mm: [f64; 3],
    #[serde(default = "default_prune_radius")]
    pub prune_radius_mm: f64,
}

fn default_prune_radius() -> f64 {
    8.0
}

/// Generator parameters shared by bundles and decoys; the per-entry seed
/// defaults to the scene seed plus the entry's position.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenerator {
    pub family: Family,
    pub n_streamlines: usize,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    pub radius_mm: f64,
    #[serde(default)]
    pub span_degrees: f64,
    #[serde(default)]
    pub pitch_mm: f64,
    #[serde(default)]
    pub dispersion_mm: f64,
    #[serde(default)]
    pub point_noise_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_n_points() -> usize {
    40
}

impl SceneGenerator {
    pub fn to_synth_spec(&self, default_seed: u64) -> SynthSpec {
        SynthSpec {
            family: self.family,
            n_streamlines: self.n_streamlines,
            n_points: self.n_points,
            radius_mm: self.radius_mm,
            span_degrees: self.span_degrees,
            pitch_mm: self.pitch_mm,
            dispersion_mm: self.dispersion_mm,
            point_noise_mm: self.point_noise_mm,
            seed: self.seed.unwrap_or(default_seed),
        }
    }
}

impl SceneSpecFile {
    /// The (spec, offset) pairs for `synth::compose_scene`, with entry
    /// seeds derived from the scene seed where unset.
    pub fn bundle_specs(&self) -> Vec<(SynthSpec, Vector3<f64>)> {
        self.bundles
            .iter()
            .enumerate()
            .map(|(i, b)| {
                (
                    b.generator.to_synth_spec(self.seed.wrapping_add(i as u64)),
                    Vector3::new(b.offset_mm[0], b.offset_mm[1], b.offset_mm[2]),
                )
            })
            .collect()
    }

    pub fn decoy_spec(&self) -> Option<SynthSpec> {
        self.decoys
            .as_ref()
            .map(|d| d.to_synth_spec(self.seed.wrapping_add(self.bundles.len() as u64)))
    }
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpecFile, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path_str(path),
        source,
    })?;
    let spec: SceneSpecFile = toml::from_str(&text).map_err(|source| IoError::Toml {
        path: path_str(path),
        source: Box::new(source),
    })?;
    if spec.bundles.is_empty() {
        return Err(IoError::Config {
            path: path_str(path),
            detail: "scene spec declares no bundles".into(),
        });
    }
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Result records and reports
// ---------------------------------------------------------------------------

/// Rounds to `digits` significant decimal digits, so serialized floats
/// are short and diff-stable.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - magnitude);
    (x * factor).round() / factor
}

const REPORT_DIGITS: i32 = 6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationEntry {
    pub radius_mm: f64,
    pub matches: usize,
    pub cost_mm: f64,
}

/// Per-bundle segmentation record: what `segment` writes into the report
/// and into each bundle's sidecar JSON (the sidecar is what run-rerun
/// comparisons read streamline IDs from).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleRecord {
    pub name: String,
    pub tractogram: String,
    pub prune_radius_mm: f64,
    pub streamline_count: usize,
    pub volume_mm3: f64,
    pub mean_length_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub final_transform: [[f64; 4]; 4],
    pub iterations: Vec<IterationEntry>,
    pub selected_ids: Vec<u32>,
    pub distances_mm: Vec<f64>,
}

impl BundleRecord {
    pub fn new(
        result: &BundleResult,
        prune_radius_mm: f64,
        volume_mm3: f64,
        mean_length_mm: f64,
    ) -> Self {
        let r6 = |x: f64| round_sig(x, REPORT_DIGITS);
        let mut final_transform = result.final_transform.to_rows();
        for row in &mut final_transform {
            for v in row.iter_mut() {
                *v = r6(*v);
            }
        }
        Self {
            name: result.name.clone(),
            tractogram: result.tractogram.clone(),
            prune_radius_mm,
            streamline_count: result.selected_ids.len(),
            volume_mm3: r6(volume_mm3),
            mean_length_mm: r6(mean_length_mm),
            warning: result.warning.clone(),
            final_transform,
            iterations: result
                .iterations
                .iter()
                .map(|i: &IterationRecord| IterationEntry {
                    radius_mm: r6(i.radius),
                    matches: i.matches,
                    cost_mm: r6(i.cost),
                })
                .collect(),
            selected_ids: result.selected_ids.clone(),
            distances_mm: result.distances.iter().map(|&d| r6(d)).collect(),
        }
    }
}

/// The whole-run report document: one record per bundle, plus any
/// comparison sections attached to the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub tractogram: String,
    pub resample_points: usize,
    pub voxel_size_mm: f64,
    pub bundles: Vec<BundleRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<ComparisonReport>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path_str(path),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| IoError::Write {
        path: path_str(path),
        source,
    })
}

pub fn write_report(report: &Report, path: &Path) -> Result<(), IoError> {
    write_json(report, path)
}

pub fn read_bundle_record(path: &Path) -> Result<BundleRecord, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path_str(path),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path_str(path),
        source,
    })
}

/// Ground-truth membership manifest written next to synthetic scenes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub bundles: Vec<NamedIds>,
    pub decoys: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedIds {
    pub name: String,
    pub ids: Vec<u32>,
}
