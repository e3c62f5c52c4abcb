//! Command implementations shared by the binary and the integration tests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use oct_track::synth::{render_frame, schedule_n_frames, Manifest, SequenceWriter, TruthFile};
use oct_track::tracker::{
    assemble, detect_frame, plane_slots, summarize, FrameDetection, TrackerConfig, TrackerOutput,
    TrackSummary,
};

use crate::config::RunConfig;
use crate::{runtime, CliError};

/// Installs the global rayon pool size; later calls with a different size are
/// ignored (rayon pools are process-wide).
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub struct SynthReport {
    pub frames: usize,
    pub period_s: f64,
    pub dir: PathBuf,
}

/// Renders the configured sequence into `out`. Frames render in parallel;
/// the writer consumes them in index order.
pub fn run_synth(cfg: &RunConfig, out: &Path, seed: u64) -> Result<SynthReport, CliError> {
    let scene = cfg.scene(seed)?;
    let pattern = cfg.pattern()?;
    let planes = schedule_n_frames(&pattern, cfg.frames);
    let rendered = planes
        .par_iter()
        .enumerate()
        .map(|(i, p)| render_frame(&scene, p, i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let mut writer = SequenceWriter::create(out).map_err(runtime)?;
    for (i, (img, pose)) in rendered.iter().enumerate() {
        writer.add_frame(i, &planes[i], pose, img).map_err(runtime)?;
    }
    writer.finish(&scene).map_err(runtime)?;
    Ok(SynthReport { frames: planes.len(), period_s: pattern.frame_period(), dir: out.to_owned() })
}

pub fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    Manifest::load(path).map_err(runtime)
}

/// Needle radius for a manifest-driven command: explicit flag, then the
/// config, then the sequence's own ground truth, then the 27G default.
pub fn resolve_radius(flag: Option<f64>, cfg: Option<&RunConfig>, manifest_path: &Path) -> f64 {
    if let Some(r) = flag {
        return r;
    }
    if let Some(c) = cfg {
        return c.needle.radius_mm;
    }
    let truth = manifest_path.parent().unwrap_or_else(|| Path::new(".")).join("truth.json");
    if let Ok(t) = TruthFile::load(&truth) {
        return t.radius_mm;
    }
    0.205
}

/// Detects every frame, in parallel, with per-frame wall-clock timings;
/// output order matches the manifest.
pub fn detect_frames_timed(
    manifest: &Manifest,
    cfg: &TrackerConfig,
) -> Result<Vec<(FrameDetection, f64)>, CliError> {
    let planes = (0..manifest.entries.len())
        .map(|i| manifest.load_plane(i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let slots = plane_slots(&planes);
    (0..manifest.entries.len())
        .into_par_iter()
        .map(|i| {
            let t0 = Instant::now();
            let det = detect_frame(manifest, cfg, i, slots[i]).map_err(runtime)?;
            Ok((det, t0.elapsed().as_secs_f64() * 1e3))
        })
        .collect()
}

/// One JSON line per frame.
#[derive(Debug, Serialize)]
pub struct DetectLine {
    pub index: usize,
    pub t_s: f64,
    pub slot: usize,
    pub found: bool,
    pub center_col: Option<f64>,
    pub center_row: Option<f64>,
    /// Semi-major / semi-minor axes in axial (row) pixels.
    pub lambda1_px: Option<f64>,
    pub lambda2_px: Option<f64>,
    pub alpha_rad: Option<f64>,
    pub n_inliers: usize,
    pub rms_residual_px: f64,
    pub tissue_support: usize,
    pub elapsed_ms: f64,
    pub failure: Option<String>,
}

pub fn detect_jsonl(detections: &[(FrameDetection, f64)]) -> String {
    let mut out = String::new();
    for (d, ms) in detections {
        let e = d.ellipse.as_ref();
        let line = DetectLine {
            index: d.index,
            t_s: d.t,
            slot: d.slot,
            found: d.ellipse.is_some(),
            center_col: e.map(|e| e.center_col),
            center_row: e.map(|e| e.center_row),
            lambda1_px: e.map(|e| e.lambda1),
            lambda2_px: e.map(|e| e.lambda2),
            alpha_rad: e.map(|e| e.alpha),
            n_inliers: d.diag.n_inliers,
            rms_residual_px: d.diag.rms_residual,
            tissue_support: d.diag.tissue_support,
            elapsed_ms: *ms,
            failure: d.diag.failure.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("detect line serializes"));
        out.push('\n');
    }
    out
}

/// Full tracker pass: parallel detection, then the sequential filter.
pub fn run_track(manifest: &Manifest, cfg: &TrackerConfig) -> Result<TrackerOutput, CliError> {
    let detections = detect_frames_timed(manifest, cfg)?.into_iter().map(|(d, _)| d).collect();
    Ok(assemble(detections, cfg))
}

/// Summary against the sequence's own ground truth when it is available.
pub fn track_summary(out: &TrackerOutput, manifest_path: &Path) -> TrackSummary {
    let truth = manifest_path.parent().unwrap_or_else(|| Path::new(".")).join("truth.json");
    summarize(out, TruthFile::load(&truth).ok().as_ref())
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub reps: usize,
    pub samples: usize,
    /// Per-frame detection + filter latency percentiles, ms.
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    /// Mean filter-pass share of each frame, ms.
    pub ekf_ms_per_frame: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Wall-clock per-frame latency of detection plus the filter pass, measured
/// on this thread. One untimed warm-up pass populates caches first.
pub fn run_bench(manifest: &Manifest, cfg: &TrackerConfig, reps: usize) -> Result<BenchReport, CliError> {
    let n = manifest.entries.len();
    if n == 0 {
        return Err(runtime("manifest has no frames"));
    }
    let planes = (0..n)
        .map(|i| manifest.load_plane(i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let slots = plane_slots(&planes);

    let one_pass = |timings: Option<&mut Vec<f64>>| -> Result<f64, CliError> {
        let mut detections = Vec::with_capacity(n);
        let mut detect_ms = Vec::with_capacity(n);
        for i in 0..n {
            let t0 = Instant::now();
            detections.push(detect_frame(manifest, cfg, i, slots[i]).map_err(runtime)?);
            detect_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let t0 = Instant::now();
        let _ = assemble(detections, cfg);
        let ekf_ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
        if let Some(out) = timings {
            out.extend(detect_ms.iter().map(|d| d + ekf_ms));
        }
        Ok(ekf_ms)
    };

    one_pass(None)?;
    let mut samples = Vec::with_capacity(n * reps.max(1));
    let mut ekf_ms_total = 0.0;
    for _ in 0..reps.max(1) {
        ekf_ms_total += one_pass(Some(&mut samples))?;
    }
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let p50 = percentile(&sorted, 0.50);
    Ok(BenchReport {
        frames: n,
        reps: reps.max(1),
        samples: samples.len(),
        p50_ms: p50,
        p95_ms: percentile(&sorted, 0.95),
        fps: 1e3 / p50,
        ekf_ms_per_frame: ekf_ms_total / reps.max(1) as f64,
    })
}
