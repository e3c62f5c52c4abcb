//! Evaluation of a tracker CSV trace against sequence ground truth.

use serde::Serialize;

use oct_track::synth::TruthFile;
use oct_track::tracker::{aligned_angle_errors, point_axis_distance, CSV_HEADER};
use oct_track::{ToolAxis, Vec3};

use crate::{runtime, validation, CliError};

/// One parsed CSV row; estimator poses are absent where the trace left the
/// fields empty.
#[derive(Debug, Clone)]
pub struct TrackRow {
    pub t: f64,
    pub ekf: Option<ToolAxis>,
    pub found: bool,
    pub skipped: bool,
    pub extrapolated: bool,
    pub gated: bool,
    pub baseline: Option<ToolAxis>,
}

fn parse_f64(field: &str, line: usize, name: &str) -> Result<Option<f64>, CliError> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| validation(format!("track CSV line {line}: bad {name} value {field:?}")))
}

pub fn parse_track_csv(text: &str) -> Result<Vec<TrackRow>, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(validation("track CSV header does not match the tracker trace format")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 23 {
            return Err(validation(format!("track CSV line {ln}: {} fields, expected 23", f.len())));
        }
        let num = |idx: usize, name: &str| parse_f64(f[idx], ln, name);
        let t = num(0, "t")?.ok_or_else(|| validation(format!("track CSV line {ln}: missing t")))?;
        let ekf = match (num(1, "x")?, num(2, "y")?, num(3, "z")?, num(4, "theta")?, num(5, "phi")?) {
            (Some(x), Some(y), Some(z), Some(th), Some(ph)) => {
                Some(ToolAxis::new(Vec3::new(x, y, z), th, ph))
            }
            _ => None,
        };
        let flag = |idx: usize| f[idx] == "1";
        let baseline = match (num(18, "baseline_x")?, num(19, "baseline_y")?, num(20, "baseline_z")?, num(21, "baseline_theta")?, num(22, "baseline_phi")?) {
            (Some(x), Some(y), Some(z), Some(th), Some(ph)) => {
                Some(ToolAxis::new(Vec3::new(x, y, z), th, ph))
            }
            _ => None,
        };
        rows.push(TrackRow {
            t,
            ekf,
            found: flag(14),
            skipped: flag(13),
            extrapolated: flag(15),
            gated: flag(16),
            baseline,
        });
    }
    Ok(rows)
}

/// Per-frame estimator error against the true axis.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrameErr {
    pub dtheta_deg: f64,
    pub dphi_deg: f64,
    pub axis_dist_mm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerFrame {
    pub index: usize,
    pub t_s: f64,
    pub ekf: Option<FrameErr>,
    pub baseline: Option<FrameErr>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadyStats {
    pub n: usize,
    pub theta_std_deg: f64,
    pub phi_std_deg: f64,
    pub theta_mean_deg: f64,
    pub phi_mean_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodStats {
    pub n: usize,
    pub theta_rms_deg: f64,
    pub phi_rms_deg: f64,
    pub axis_dist_mean_mm: f64,
    pub axis_dist_p95_mm: f64,
    /// Error spread over the steady-state window; absent when the window
    /// holds fewer than two poses of this method.
    pub steady: Option<SteadyStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Counts {
    pub ekf_poses: usize,
    pub baseline_poses: usize,
    pub found: usize,
    pub skipped: usize,
    pub gated: usize,
    pub extrapolated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_frames: usize,
    /// First frame of the steady-state window used for the std comparison.
    pub steady_state_start: usize,
    pub counts: Counts,
    pub ekf: Option<MethodStats>,
    pub baseline: Option<MethodStats>,
    /// Baseline / EKF steady-state error std ratios; > 1 means the filter is
    /// steadier. Absent when either method lacks steady-state poses.
    pub steady_std_ratio_theta: Option<f64>,
    pub steady_std_ratio_phi: Option<f64>,
    pub per_frame: Vec<PerFrame>,
}

fn frame_err(est: &ToolAxis, truth: &ToolAxis) -> FrameErr {
    let (dt, dp) = aligned_angle_errors(est, truth);
    FrameErr {
        dtheta_deg: dt.to_degrees(),
        dphi_deg: dp.to_degrees(),
        axis_dist_mm: point_axis_distance(&est.base, truth),
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = (q * (v.len() - 1) as f64).round() as usize;
    v[idx.min(v.len() - 1)]
}

fn method_stats(errs: &[(usize, FrameErr)], steady_start: usize) -> Option<MethodStats> {
    if errs.is_empty() {
        return None;
    }
    let dts: Vec<f64> = errs.iter().map(|(_, e)| e.dtheta_deg).collect();
    let dps: Vec<f64> = errs.iter().map(|(_, e)| e.dphi_deg).collect();
    let dds: Vec<f64> = errs.iter().map(|(_, e)| e.axis_dist_mm).collect();
    let steady: Vec<&FrameErr> =
        errs.iter().filter(|(i, _)| *i >= steady_start).map(|(_, e)| e).collect();
    let steady = if steady.len() >= 2 {
        let st: Vec<f64> = steady.iter().map(|e| e.dtheta_deg).collect();
        let sp: Vec<f64> = steady.iter().map(|e| e.dphi_deg).collect();
        Some(SteadyStats {
            n: st.len(),
            theta_std_deg: sample_std(&st),
            phi_std_deg: sample_std(&sp),
            theta_mean_deg: mean(&st),
            phi_mean_deg: mean(&sp),
        })
    } else {
        None
    };
    Some(MethodStats {
        n: errs.len(),
        theta_rms_deg: rms(&dts),
        phi_rms_deg: rms(&dps),
        axis_dist_mean_mm: mean(&dds),
        axis_dist_p95_mm: percentile(dds, 0.95),
        steady,
    })
}

/// First index of the steady-state window: a tenth of the sequence, at least
/// 10 frames, never past the end.
pub fn steady_start(n: usize) -> usize {
    if n <= 12 {
        return 0;
    }
    10usize.max(n / 10).min(n - 2)
}

pub fn build_report(rows: &[TrackRow], truth: &TruthFile) -> Result<EvalReport, CliError> {
    if rows.len() != truth.frames.len() {
        return Err(runtime(format!(
            "frame count mismatch: track CSV has {} rows, ground truth has {} frames",
            rows.len(),
            truth.frames.len()
        )));
    }
    let n = rows.len();
    let steady = steady_start(n);
    let mut per_frame = Vec::with_capacity(n);
    let mut ekf_errs = Vec::new();
    let mut base_errs = Vec::new();
    for (i, (row, tf)) in rows.iter().zip(&truth.frames).enumerate() {
        let ta = tf.axis();
        let ekf = row.ekf.as_ref().map(|e| frame_err(e, &ta));
        let baseline = row.baseline.as_ref().map(|b| frame_err(b, &ta));
        if let Some(e) = ekf {
            ekf_errs.push((i, e));
        }
        if let Some(b) = baseline {
            base_errs.push((i, b));
        }
        per_frame.push(PerFrame { index: i, t_s: row.t, ekf, baseline });
    }
    let ekf = method_stats(&ekf_errs, steady);
    let baseline = method_stats(&base_errs, steady);
    let ratio = |pick: fn(&SteadyStats) -> f64| -> Option<f64> {
        let e = ekf.as_ref()?.steady.as_ref()?;
        let b = baseline.as_ref()?.steady.as_ref()?;
        let (es, bs) = (pick(e), pick(b));
        (es > 0.0).then(|| bs / es)
    };
    let steady_std_ratio_theta = ratio(|s| s.theta_std_deg);
    let steady_std_ratio_phi = ratio(|s| s.phi_std_deg);
    Ok(EvalReport {
        n_frames: n,
        steady_state_start: steady,
        counts: Counts {
            ekf_poses: rows.iter().filter(|r| r.ekf.is_some()).count(),
            baseline_poses: rows.iter().filter(|r| r.baseline.is_some()).count(),
            found: rows.iter().filter(|r| r.found).count(),
            skipped: rows.iter().filter(|r| r.skipped).count(),
            gated: rows.iter().filter(|r| r.gated).count(),
            extrapolated: rows.iter().filter(|r| r.extrapolated).count(),
        },
        ekf,
        baseline,
        steady_std_ratio_theta,
        steady_std_ratio_phi,
        per_frame,
    })
}

pub fn report_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
