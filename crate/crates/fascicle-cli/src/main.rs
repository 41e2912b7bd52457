//! `fascicle` — segment white matter bundles from tractograms and
//! evaluate reproducibility.
//!
//! Subcommands: `segment` (atlas-driven bundle extraction), `compare`
//! (run-rerun / scan-rescan agreement), `search` (raw radius queries),
//! `synth` (deterministic synthetic scenes), `info` (tractogram summary).
//! Logs go to stderr; machine-readable output goes to stdout or files.
//! All outputs are deterministic for fixed inputs, whatever the thread
//! count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Point3;
use serde_json::json;

use fascicle::io::{
    self, round_sig, AtlasConfig, BundleRecord, ConfigBundle, ConfigFile, GroundTruthFile,
    NamedIds, Report,
};
use fascicle::metrics::{self, BundleSummary, CompareMode, GridSpec};
use fascicle::search::build_index;
use fascicle::segmentation::{segment_all, BundleModel, BundleResult};
use fascicle::streamline::{Streamline, Tractogram};
use fascicle::synth;

#[derive(Parser)]
#[command(name = "fascicle", version, about = "White matter bundle segmentation toolkit")]
struct Cli {
    /// Suppress progress logging on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment atlas bundles out of a tractogram.
    Segment {
        /// Subject tractogram (.tck).
        #[arg(long)]
        tractogram: PathBuf,
        /// Atlas configuration (.toml).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (bundle .tck files, sidecar .json, report.json).
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: available cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Replace existing output files.
        #[arg(long)]
        overwrite: bool,
    },
    /// Compare two segmentations of the same bundle.
    Compare {
        /// First bundle (.tck; run-rerun mode also reads the .json sidecar).
        #[arg(long)]
        a: PathBuf,
        /// Second bundle (.tck).
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Voxel size for the shared comparison grid, in mm.
        #[arg(long, default_value_t = 1.0)]
        voxel_size: f64,
    },
    /// Radius search of query streamlines against a tractogram.
    Search {
        #[arg(long)]
        tractogram: PathBuf,
        /// Query streamlines (.tck).
        #[arg(long)]
        queries: PathBuf,
        /// Match radius in mm (exact MDF).
        #[arg(long)]
        radius: f64,
        /// Resampling point count.
        #[arg(long, default_value_t = 32)]
        points: usize,
        /// Worker threads (default: available cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate a synthetic scene with ground truth.
    Synth {
        /// Scene description (.toml).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (scene.tck, models/, ground_truth.json, config.toml).
        #[arg(long)]
        out: PathBuf,
        /// Replace existing output files.
        #[arg(long)]
        overwrite: bool,
    },
    /// Print a tractogram summary.
    Info {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RunRerun,
    ScanRescan,
}

enum CliError {
    /// Bad input: exits with code 1.
    Validation(String),
    /// Failure while producing output: exits with code 2.
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let log = Logger { quiet: cli.quiet };
    match cli.command {
        Command::Segment {
            tractogram,
            config,
            out,
            threads,
            overwrite,
        } => in_pool(threads, || cmd_segment(&tractogram, &config, &out, overwrite, &log)),
        Command::Compare { a, b, mode, voxel_size } => cmd_compare(&a, &b, mode, voxel_size, &log),
        Command::Search {
            tractogram,
            queries,
            radius,
            points,
            threads,
        } => in_pool(threads, || cmd_search(&tractogram, &queries, radius, points, &log)),
        Command::Synth { spec, out, overwrite } => cmd_synth(&spec, &out, overwrite, &log),
        Command::Info { path } => cmd_info(&path, &log),
    }
}

struct Logger {
    quiet: bool,
}

impl Logger {
    fn status(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn warn(&self, msg: impl AsRef<str>) {
        eprintln!("warning: {}", msg.as_ref());
    }
}

/// Runs the closure inside a rayon pool of the requested size; results
/// are sorted before output, so the thread count never changes them.
fn in_pool<T>(threads: Option<usize>, job: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(CliError::runtime)?;
    pool.install(job)
}

fn load_tractogram(path: &Path, log: &Logger) -> Result<Tractogram, CliError> {
    let file = io::read_tck(path).map_err(CliError::validation)?;
    for w in &file.warnings {
        log.warn(w);
    }
    Ok(file.tractogram)
}

fn tractogram_bounds(streamlines: &[Streamline]) -> Option<(Point3<f64>, Point3<f64>)> {
    let mut bounds: Option<(Point3<f64>, Point3<f64>)> = None;
    for s in streamlines {
        let (slo, shi) = s.bounds();
        bounds = Some(match bounds {
            None => (slo, shi),
            Some((mut lo, mut hi)) => {
                for axis in 0..3 {
                    lo[axis] = lo[axis].min(slo[axis]);
                    hi[axis] = hi[axis].max(shi[axis]);
                }
                (lo, hi)
            }
        });
    }
    bounds
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

fn cmd_segment(
    tractogram_path: &Path,
    config_path: &Path,
    out: &Path,
    overwrite: bool,
    log: &Logger,
) -> Result<(), CliError> {
    let config = io::load_config(config_path).map_err(CliError::validation)?;
    let tractogram = load_tractogram(tractogram_path, log)?;
    log.status(format!(
        "loaded {} streamlines from {}",
        tractogram.len(),
        tractogram_path.display()
    ));

    fs::create_dir_all(out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut planned: Vec<PathBuf> = vec![out.join("report.json")];
    for bundle in &config.bundles {
        planned.push(out.join(format!("{}.tck", bundle.name)));
        planned.push(out.join(format!("{}.json", bundle.name)));
    }
    if !overwrite {
        for path in &planned {
            if path.exists() {
                return Err(CliError::Validation(format!(
                    "{} already exists; pass --overwrite to replace it",
                    path.display()
                )));
            }
        }
    }

    let models = config
        .bundles
        .iter()
        .map(|entry| {
            let file = io::read_tck(&entry.model_file).map_err(CliError::validation)?;
            for w in &file.warnings {
                log.warn(w);
            }
            let resampled = file
                .tractogram
                .resample_all(config.resample_points)
                .map_err(CliError::validation)?;
            BundleModel::with_geometric_schedule(
                entry.name.clone(),
                resampled,
                entry.prune_radius_mm,
                entry.schedule_steps,
                entry.start_factor,
            )
            .map_err(CliError::validation)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let index =
        build_index(&tractogram, config.resample_points).map_err(CliError::validation)?;
    log.status(format!(
        "indexed {} oriented entries at {} points",
        index.entry_count(),
        config.resample_points
    ));

    let results = segment_all(&index, &models, &config.registration, &config.global_affine)
        .map_err(CliError::runtime)?;

    let mut records = Vec::with_capacity(results.len());
    for (entry, result) in config.bundles.iter().zip(&results) {
        if let Some(w) = &result.warning {
            log.warn(format!("{}: {w}", result.name));
        }
        let selected: Vec<Streamline> = result
            .selected_ids
            .iter()
            .map(|&id| tractogram.streamlines()[id as usize].clone())
            .collect();
        let record = summarize_bundle(&selected, result, entry.prune_radius_mm, &config);
        let bundle_tck = out.join(format!("{}.tck", result.name));
        let selected_tractogram =
            Tractogram::from_streamlines(selected, tractogram.provenance());
        for w in io::write_tck(&selected_tractogram, &bundle_tck).map_err(CliError::runtime)? {
            log.warn(w);
        }
        io::write_json(&record, &out.join(format!("{}.json", result.name)))
            .map_err(CliError::runtime)?;
        log.status(format!(
            "{}: {} streamlines, volume {} mm^3",
            record.name, record.streamline_count, record.volume_mm3
        ));
        records.push(record);
    }

    let report = Report {
        tractogram: tractogram.provenance().to_string(),
        resample_points: config.resample_points,
        voxel_size_mm: config.voxel_size_mm,
        bundles: records,
        comparisons: Vec::new(),
    };
    io::write_report(&report, &out.join("report.json")).map_err(CliError::runtime)?;
    log.status(format!("report written to {}", out.join("report.json").display()));
    Ok(())
}

fn summarize_bundle(
    selected: &[Streamline],
    result: &BundleResult,
    prune_radius_mm: f64,
    config: &AtlasConfig,
) -> BundleRecord {
    let (volume, mean_length) = match tractogram_bounds(selected) {
        None => (0.0, 0.0),
        Some((lo, hi)) => {
            let grid = GridSpec::fit(lo, hi, config.voxel_size_mm, 2)
                .expect("positive voxel size validated at load");
            let mask = metrics::voxelize(selected, &grid);
            let mean =
                selected.iter().map(|s| s.length()).sum::<f64>() / selected.len() as f64;
            (metrics::volume(&mask), mean)
        }
    };
    BundleRecord::new(result, prune_radius_mm, volume, mean_length)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn cmd_compare(
    a: &Path,
    b: &Path,
    mode: ModeArg,
    voxel_size: f64,
    log: &Logger,
) -> Result<(), CliError> {
    if voxel_size <= 0.0 || voxel_size.is_nan() {
        return Err(CliError::Validation(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let mode = match mode {
        ModeArg::RunRerun => CompareMode::RunRerun,
        ModeArg::ScanRescan => CompareMode::ScanRescan,
    };
    let tract_a = load_tractogram(a, log)?;
    let tract_b = load_tractogram(b, log)?;

    // A shared grid over the union of both bundles.
    let all: Vec<Streamline> = tract_a
        .streamlines()
        .iter()
        .chain(tract_b.streamlines())
        .cloned()
        .collect();
    let grid = match tractogram_bounds(&all) {
        Some((lo, hi)) => GridSpec::fit(lo, hi, voxel_size, 2).map_err(CliError::validation)?,
        None => GridSpec::axis_aligned(Point3::origin(), voxel_size, [1, 1, 1]),
    };

    let sidecar = |tck: &Path| -> Result<BundleRecord, CliError> {
        let path = tck.with_extension("json");
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "run-rerun mode needs the segmentation sidecar {}; it is written by `fascicle segment`",
                path.display()
            )));
        }
        io::read_bundle_record(&path).map_err(CliError::validation)
    };
    let summary = |tck_path: &Path,
                   tractogram: &Tractogram,
                   record: Option<&BundleRecord>|
     -> BundleSummary {
        let (name, provenance, ids) = match record {
            Some(r) => (
                r.name.clone(),
                r.tractogram.clone(),
                Some(r.selected_ids.clone()),
            ),
            None => (
                tck_path.display().to_string(),
                tractogram.provenance().to_string(),
                None,
            ),
        };
        BundleSummary::new(name, provenance, ids, tractogram.streamlines(), &grid)
    };

    let (summary_a, summary_b) = match mode {
        CompareMode::RunRerun => {
            let rec_a = sidecar(a)?;
            let rec_b = sidecar(b)?;
            (
                summary(a, &tract_a, Some(&rec_a)),
                summary(b, &tract_b, Some(&rec_b)),
            )
        }
        CompareMode::ScanRescan => (summary(a, &tract_a, None), summary(b, &tract_b, None)),
    };

    let report =
        metrics::compare_bundles(&summary_a, &summary_b, mode).map_err(CliError::validation)?;
    let rounded = metrics::ComparisonReport {
        dice: round_sig(report.dice, 6),
        adjacency_mm: round_sig(report.adjacency_mm, 6),
        volume_delta_mm3: round_sig(report.volume_delta_mm3, 6),
        mean_length_delta_mm: round_sig(report.mean_length_delta_mm, 6),
        streamline_dice: report.streamline_dice.map(|d| round_sig(d, 6)),
        ..report
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&rounded).map_err(CliError::runtime)?
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

fn cmd_search(
    tractogram_path: &Path,
    queries_path: &Path,
    radius: f64,
    points: usize,
    log: &Logger,
) -> Result<(), CliError> {
    let tractogram = load_tractogram(tractogram_path, log)?;
    let queries = load_tractogram(queries_path, log)?;
    let index = build_index(&tractogram, points).map_err(CliError::validation)?;
    let resampled = queries
        .resample_all(points)
        .map_err(CliError::validation)?;
    let matches = index
        .radius_search(&resampled, radius)
        .map_err(CliError::validation)?;
    log.status(format!(
        "{} matches across {} queries",
        matches.len(),
        resampled.len()
    ));

    let mut rows: Vec<_> = matches.matches().to_vec();
    rows.sort_by(|x, y| {
        x.query
            .cmp(&y.query)
            .then(x.distance.total_cmp(&y.distance))
            .then(x.target.cmp(&y.target))
    });
    let mut stdout = String::new();
    for m in rows {
        stdout.push_str(&format!("{}\t{}\t{:.6}\n", m.query, m.target, m.distance));
    }
    print!("{stdout}");
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(spec_path: &Path, out: &Path, overwrite: bool, log: &Logger) -> Result<(), CliError> {
    let spec = io::load_scene_spec(spec_path).map_err(CliError::validation)?;
    let bundle_specs = spec.bundle_specs();
    let decoy_spec = spec.decoy_spec();
    let (scene, ids) =
        synth::compose_scene(&bundle_specs, decoy_spec.as_ref()).map_err(CliError::validation)?;

    fs::create_dir_all(out.join("models"))
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut planned = vec![
        out.join("scene.tck"),
        out.join("ground_truth.json"),
        out.join("config.toml"),
    ];
    for bundle in &spec.bundles {
        planned.push(out.join("models").join(format!("{}.tck", bundle.name)));
    }
    if !overwrite {
        for path in &planned {
            if path.exists() {
                return Err(CliError::Validation(format!(
                    "{} already exists; pass --overwrite to replace it",
                    path.display()
                )));
            }
        }
    }

    io::write_tck(&scene, &out.join("scene.tck")).map_err(CliError::runtime)?;
    log.status(format!("scene.tck: {} streamlines", scene.len()));

    let mut truth = GroundTruthFile {
        bundles: Vec::new(),
        decoys: ids.decoys.clone(),
    };
    let mut config = ConfigFile::default();
    for (bundle, bundle_ids) in spec.bundles.iter().zip(&ids.bundles) {
        let streamlines: Vec<Streamline> = bundle_ids
            .iter()
            .map(|&id| scene.streamlines()[id as usize].clone())
            .collect();
        let model_rel = Path::new("models").join(format!("{}.tck", bundle.name));
        let model = Tractogram::from_streamlines(streamlines, "synthetic");
        io::write_tck(&model, &out.join(&model_rel)).map_err(CliError::runtime)?;
        truth.bundles.push(NamedIds {
            name: bundle.name.clone(),
            ids: bundle_ids.clone(),
        });
        config.bundles.push(ConfigBundle {
            name: bundle.name.clone(),
            model: model_rel,
            prune_radius_mm: bundle.prune_radius_mm,
            schedule_steps: 3,
            start_factor: 2.0,
        });
    }
    io::write_json(&truth, &out.join("ground_truth.json")).map_err(CliError::runtime)?;
    let config_text = toml::to_string_config(&config).map_err(CliError::runtime)?;
    fs::write(out.join("config.toml"), config_text)
        .map_err(|e| CliError::runtime(format!("cannot write config.toml: {e}")))?;
    log.status(format!(
        "wrote {} models, ground_truth.json and config.toml to {}",
        spec.bundles.len(),
        out.display()
    ));
    Ok(())
}

mod toml {
    //! Minimal TOML emission for the generated config, kept here so the
    //! binary does not need a TOML serializer dependency.
    use fascicle::io::ConfigFile;

    pub fn to_string_config(config: &ConfigFile) -> Result<String, String> {
        let mut out = String::new();
        out.push_str(&format!("resample_points = {}\n", config.resample_points));
        out.push_str(&format!("voxel_size_mm = {:.1}\n", config.voxel_size_mm));
        for bundle in &config.bundles {
            out.push_str("\n[[bundle]]\n");
            out.push_str(&format!("name = \"{}\"\n", bundle.name));
            out.push_str(&format!(
                "model = \"{}\"\n",
                bundle.model.display().to_string().replace('\\', "/")
            ));
            out.push_str(&format!("prune_radius_mm = {:.1}\n", bundle.prune_radius_mm));
            out.push_str(&format!("schedule_steps = {}\n", bundle.schedule_steps));
            out.push_str(&format!("start_factor = {:.1}\n", bundle.start_factor));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// info
// ---------------------------------------------------------------------------

fn cmd_info(path: &Path, log: &Logger) -> Result<(), CliError> {
    let tractogram = load_tractogram(path, log)?;
    let lengths: Vec<f64> = tractogram.streamlines().iter().map(|s| s.length()).collect();
    let counts: Vec<usize> = tractogram
        .streamlines()
        .iter()
        .map(|s| s.num_points())
        .collect();
    let total_points: usize = counts.iter().sum();

    let stats = |values: &[f64]| -> serde_json::Value {
        if values.is_empty() {
            return serde_json::Value::Null;
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        json!({
            "min": round_sig(min, 6),
            "mean": round_sig(mean, 6),
            "max": round_sig(max, 6),
        })
    };
    let bounds = tractogram_bounds(tractogram.streamlines()).map(|(lo, hi)| {
        json!({
            "min": [round_sig(lo.x, 6), round_sig(lo.y, 6), round_sig(lo.z, 6)],
            "max": [round_sig(hi.x, 6), round_sig(hi.y, 6), round_sig(hi.z, 6)],
        })
    });
    let point_counts: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let doc = json!({
        "path": path.display().to_string(),
        "streamline_count": tractogram.len(),
        "total_points": total_points,
        "length_mm": stats(&lengths),
        "points_per_streamline": stats(&point_counts),
        "bounds_mm": bounds,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).map_err(CliError::runtime)?
    );
    Ok(())
}
