use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use clap::{Parser, Subcommand};

use oct_track::synth::{PatternKind, TruthFile};
use oct_track::tracker::TrackerConfig;
use oct_track_cli::config::RunConfig;
use oct_track_cli::{eval, ops, plot, CliError};

#[derive(Parser)]
#[command(name = "oct-track", version, about = "Needle tracking in cross-sectional OCT: synthesis, detection, tracking, evaluation, benchmarking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic B-scan sequence (images + manifest + ground truth)
    Synth {
        /// Experiment TOML
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured frame count
        #[arg(long)]
        frames: Option<usize>,
        /// Override the pattern kind: parallel, cross or rotated
        #[arg(long)]
        pattern: Option<String>,
        /// Rayon worker threads
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Per-frame ellipse detection over a rendered sequence, JSON lines out
    Detect {
        /// Path to manifest.json
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSONL path
        #[arg(long)]
        out: PathBuf,
        /// Experiment TOML with detection overrides
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Needle radius in mm (default: config, then the sequence truth)
        #[arg(long)]
        radius: Option<f64>,
        /// Enable the pathology exclusion pass
        #[arg(long)]
        pathology: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Track the needle axis through a sequence (EKF + two-frame baseline)
    Track {
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV path; a .summary.json lands next to it
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        pathology: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare a track CSV against sequence ground truth
    Eval {
        /// Tracker CSV trace
        #[arg(long)]
        track: PathBuf,
        /// truth.json of the same sequence
        #[arg(long)]
        truth: PathBuf,
        /// Report JSON path
        #[arg(long)]
        out: PathBuf,
        /// Optional SVG plot path
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Per-frame detection + filter latency (single-threaded)
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        /// Timed passes over the sequence
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        pathology: bool,
        /// Optional JSON report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn check_radius(r: f64) -> Result<f64, CliError> {
    if r > 0.0 && r <= 10.0 {
        Ok(r)
    } else {
        Err(CliError::Validation(format!("radius = {r} mm outside (0, 10]")))
    }
}

/// Tracker configuration for the manifest-driven commands.
fn tracker_for(
    config: Option<&Path>,
    seed: Option<u64>,
    radius: Option<f64>,
    pathology: bool,
    manifest: &Path,
) -> Result<TrackerConfig, CliError> {
    match config {
        Some(path) => {
            let rc = RunConfig::load(path)?;
            let mut cfg = rc.tracker_config(seed.unwrap_or(rc.seed), pathology)?;
            if let Some(r) = radius {
                cfg.radius_mm = check_radius(r)?;
                if let Some(d) = &mut cfg.detect {
                    let plane = rc.pattern()?.templates[0].clone();
                    d.needle_diameter_px = 2.0 * r / plane.px_row_mm();
                }
            }
            Ok(cfg)
        }
        None => {
            let r = check_radius(ops::resolve_radius(radius, None, manifest))?;
            let mut cfg = TrackerConfig::new(r);
            cfg.seed = seed.unwrap_or(0);
            cfg.pathology_exclusion = pathology;
            Ok(cfg)
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { config, out, seed, frames, pattern, threads } => {
            ops::init_threads(threads);
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = frames {
                cfg.frames = n;
            }
            if let Some(p) = &pattern {
                cfg.pattern.kind = match p.as_str() {
                    "parallel" => PatternKind::Parallel,
                    "cross" => PatternKind::Cross,
                    "rotated" => PatternKind::Rotated,
                    other => {
                        return Err(CliError::Validation(format!(
                            "unknown pattern {other:?}, expected parallel, cross or rotated"
                        )))
                    }
                };
            }
            cfg.validate()?;
            let seed = seed.unwrap_or(cfg.seed);
            let rep = ops::run_synth(&cfg, &out, seed)?;
            println!(
                "rendered {} frames to {} (frame period {:.3} ms, {:.1} Hz)",
                rep.frames,
                rep.dir.display(),
                rep.period_s * 1e3,
                1.0 / rep.period_s
            );
            Ok(())
        }
        Cmd::Detect { manifest, out, config, seed, radius, pathology, threads } => {
            ops::init_threads(threads);
            let cfg = tracker_for(config.as_deref(), seed, radius, pathology, &manifest)?;
            let m = ops::load_manifest(&manifest)?;
            let detections = ops::detect_frames_timed(&m, &cfg)?;
            let found = detections.iter().filter(|(d, _)| d.ellipse.is_some()).count();
            let mut ms: Vec<f64> = detections.iter().map(|(_, ms)| *ms).collect();
            ms.sort_by(|a, b| a.total_cmp(b));
            let median = ms.get(ms.len() / 2).copied().unwrap_or(f64::NAN);
            write(&out, &ops::detect_jsonl(&detections))?;
            println!(
                "detected {found}/{} frames -> {} (median {median:.2} ms/frame)",
                detections.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Track { manifest, out, config, seed, radius, pathology, threads } => {
            ops::init_threads(threads);
            let cfg = tracker_for(config.as_deref(), seed, radius, pathology, &manifest)?;
            let m = ops::load_manifest(&manifest)?;
            let result = ops::run_track(&m, &cfg)?;
            write(&out, &result.to_csv())?;
            let summary = ops::track_summary(&result, &manifest);
            let mut json = serde_json::to_string_pretty(&summary)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            json.push('\n');
            let summary_path = out.with_extension("summary.json");
            write(&summary_path, &json)?;
            println!(
                "tracked {} frames: {} detections, {} skipped, {} gated -> {}",
                summary.n_frames,
                summary.n_found,
                summary.n_skipped,
                summary.n_gated,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval { track, truth, out, plots } => {
            let text = fs::read_to_string(&track)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", track.display())))?;
            let rows = eval::parse_track_csv(&text)?;
            let truth = TruthFile::load(&truth).map_err(|e| CliError::Runtime(e.to_string()))?;
            let report = eval::build_report(&rows, &truth)?;
            write(&out, &eval::report_json(&report))?;
            if let Some(p) = plots {
                write(&p, &plot::eval_plots(&report))?;
            }
            match &report.ekf {
                Some(e) => println!(
                    "evaluated {} frames -> {} (EKF theta RMS {:.3} deg, phi RMS {:.3} deg)",
                    report.n_frames,
                    out.display(),
                    e.theta_rms_deg,
                    e.phi_rms_deg
                ),
                None => println!(
                    "evaluated {} frames -> {} (no EKF poses)",
                    report.n_frames,
                    out.display()
                ),
            }
            Ok(())
        }
        Cmd::Bench { manifest, reps, config, seed, radius, pathology, out } => {
            let cfg = tracker_for(config.as_deref(), seed, radius, pathology, &manifest)?;
            let m = ops::load_manifest(&manifest)?;
            let rep = ops::run_bench(&m, &cfg, reps)?;
            if let Some(path) = out {
                let mut json = serde_json::to_string_pretty(&rep)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                json.push('\n');
                write(&path, &json)?;
            }
            println!(
                "{} frames x {} reps: p50 {:.2} ms, p95 {:.2} ms per frame ({:.1} fps), filter share {:.3} ms",
                rep.frames, rep.reps, rep.p50_ms, rep.p95_ms, rep.fps, rep.ekf_ms_per_frame
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}
