//! Sequence-level tracking.
//!
//! Frames are detected in acquisition order and fed to the EKF; frames with
//! no usable detection accumulate Δt so the next prediction covers the whole
//! gap with a single step. A two-frame line-fit baseline runs alongside the
//! filter on every consecutive detection pair. Tissue-surface inliers are
//! collected for sphere fitting, and the tracked axis can be intersected
//! with the fitted sphere to produce the injection-point guidance.

use std::fmt::Write as _;
use std::path::Path;
use std::{fs, io};

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::detect::{DetectConfig, DetectDiag};
use crate::ekf::{self, Belief, ControlInput, NeedleState, NoiseConfig};
use crate::geometry::{angles_from_direction, wrap_angle, EllipseParams, ScanPlane, ToolAxis, Vec3};
use crate::synth::{Manifest, SynthError, TruthFile};

/// Sphere-fit inlier threshold, mm (30 µm).
pub const SPHERE_INLIER_MM: f64 = 0.03;
/// Spheres larger than this are treated as degenerate plane fits, mm.
pub const SPHERE_RADIUS_MAX_MM: f64 = 100.0;
/// Minimum 3D separation of ellipse centers for the two-frame baseline, mm.
pub const BASELINE_MIN_SEPARATION_MM: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("baseline centers nearly coincide (separation {separation:.2e} mm)")]
    DegenerateBaseline { separation: f64 },
    #[error("target surface fit failed: {why}")]
    DegenerateSurface { why: String },
    #[error("axis misses the target sphere (closest approach {miss:.3} mm outside)")]
    NoIntersection { miss: f64 },
    #[error(transparent)]
    Sequence(#[from] SynthError),
}

/// Sequence-run parameters.
#[derive(Debug, Clone)]
pub struct TrackerConfig {
    /// Needle radius, mm; sets the pinned ellipse minor axis per plane.
    pub radius_mm: f64,
    pub noise: NoiseConfig,
    /// Number of detections the EKF initialization line fit uses.
    pub init_window: usize,
    /// Seed for the per-frame detection RNG streams.
    pub seed: u64,
    /// Enables the chained-proximity exclusion pass in detection.
    pub pathology_exclusion: bool,
    /// Full detection config override; `None` derives one per plane from
    /// `radius_mm` (the override is used verbatim, including its pathology
    /// flag).
    pub detect: Option<DetectConfig>,
    /// Plane slots whose detections are discarded (ablation runs).
    pub force_fail_slots: Vec<usize>,
    /// Frame indices whose detections are discarded.
    pub force_fail_frames: Vec<usize>,
    /// Keep every n-th tissue inlier column for the surface fit.
    pub eye_point_stride: usize,
}

impl TrackerConfig {
    pub fn new(radius_mm: f64) -> Self {
        Self {
            radius_mm,
            noise: NoiseConfig::default(),
            init_window: 2,
            seed: 0,
            pathology_exclusion: false,
            detect: None,
            force_fail_slots: Vec::new(),
            force_fail_frames: Vec::new(),
            eye_point_stride: 8,
        }
    }
}

/// One frame's detection stage output.
#[derive(Debug, Clone)]
pub struct FrameDetection {
    pub index: usize,
    pub t: f64,
    pub plane: ScanPlane,
    /// Id of the frame's plane geometry within the scan pattern.
    pub slot: usize,
    pub forced_fail: bool,
    pub ellipse: Option<EllipseParams>,
    /// Detected ellipse center mapped to 3D, mm.
    pub center3d: Option<Vec3>,
    /// Subsampled tissue-surface inliers mapped to 3D, mm.
    pub eye_points: Vec<Vec3>,
    pub diag: DetectDiag,
}

fn plane_key(p: &ScanPlane) -> [i64; 9] {
    let q = |v: f64| (v * 1e6).round() as i64;
    [
        q(p.origin.x),
        q(p.origin.y),
        q(p.origin.z),
        q(p.normal.x),
        q(p.normal.y),
        q(p.normal.z),
        q(p.col_dir.x),
        q(p.col_dir.y),
        q(p.col_dir.z),
    ]
}

/// Groups frames sharing plane geometry (placement quantized to 1e-6 mm);
/// slot ids follow first appearance.
pub fn plane_slots(planes: &[ScanPlane]) -> Vec<usize> {
    let mut keys: Vec<[i64; 9]> = Vec::new();
    planes
        .iter()
        .map(|p| {
            let k = plane_key(p);
            keys.iter().position(|q| *q == k).unwrap_or_else(|| {
                keys.push(k);
                keys.len() - 1
            })
        })
        .collect()
}

fn frame_detect_config(cfg: &TrackerConfig, plane: &ScanPlane) -> DetectConfig {
    match &cfg.detect {
        Some(d) => d.clone(),
        None => {
            let mut d = DetectConfig::for_plane(cfg.radius_mm, plane);
            d.pathology_exclusion = cfg.pathology_exclusion;
            d
        }
    }
}

/// Runs detection on one frame. Stateless apart from the manifest, so frames
/// may be detected concurrently ahead of the (sequential) filter pass; each
/// frame gets its own RNG stream.
pub fn detect_frame(
    manifest: &Manifest,
    cfg: &TrackerConfig,
    idx: usize,
    slot: usize,
) -> Result<FrameDetection, TrackerError> {
    let plane = manifest.load_plane(idx)?;
    let t = manifest.entries[idx].timestamp_s;
    if cfg.force_fail_slots.contains(&slot) || cfg.force_fail_frames.contains(&idx) {
        return Ok(FrameDetection {
            index: idx,
            t,
            plane,
            slot,
            forced_fail: true,
            ellipse: None,
            center3d: None,
            eye_points: Vec::new(),
            diag: DetectDiag {
                failure: Some("forced detection failure".into()),
                ..DetectDiag::default()
            },
        });
    }
    let img = manifest.load_image(idx)?;
    let dcfg = frame_detect_config(cfg, &plane);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // High bit keeps detection streams disjoint from the renderer's.
    rng.set_stream(1u64 << 63 | idx as u64);
    let res = crate::detect::detect(&img, &dcfg, &mut rng);
    let center3d = res.ellipse.as_ref().map(|e| plane.pixel_to_3d(e.center_col, e.center_row));
    let stride = cfg.eye_point_stride.max(1);
    let eye_points = res
        .eye_points
        .iter()
        .step_by(stride)
        .map(|p| plane.pixel_to_3d(p[0], p[1]))
        .collect();
    Ok(FrameDetection {
        index: idx,
        t,
        plane,
        slot,
        forced_fail: false,
        ellipse: res.ellipse,
        center3d,
        eye_points,
        diag: res.diag,
    })
}

/// Detects every frame of the manifest in order.
pub fn detect_all(manifest: &Manifest, cfg: &TrackerConfig) -> Result<Vec<FrameDetection>, TrackerError> {
    let planes = (0..manifest.entries.len())
        .map(|i| manifest.load_plane(i))
        .collect::<Result<Vec<_>, _>>()?;
    let slots = plane_slots(&planes);
    (0..manifest.entries.len()).map(|i| detect_frame(manifest, cfg, i, slots[i])).collect()
}

/// EKF pose emitted for one frame.
#[derive(Debug, Clone, Copy)]
pub struct EkfPose {
    pub state: NeedleState,
    pub trace_p: f64,
    /// True when the pose is a prediction only (no measurement this frame).
    pub extrapolated: bool,
}

/// Per-frame tracker output row.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub index: usize,
    pub t: f64,
    pub slot: usize,
    pub plane: ScanPlane,
    pub found: bool,
    pub forced_fail: bool,
    /// True when the filter incorporated no measurement this frame.
    pub skipped: bool,
    /// Absent before initialization completes.
    pub ekf: Option<EkfPose>,
    pub mahalanobis: Option<f64>,
    pub gated: bool,
    pub ekf_error: Option<String>,
    pub baseline: Option<ToolAxis>,
    pub baseline_degenerate: bool,
    pub ellipse: Option<EllipseParams>,
    pub diag: DetectDiag,
}

/// Whole-sequence tracking result.
#[derive(Debug, Clone)]
pub struct TrackerOutput {
    pub frames: Vec<FrameRecord>,
    /// Aggregated tissue-surface points for [`fit_target_surface`], mm.
    pub eye_points: Vec<Vec3>,
}

fn hemisphere_dir(d: Vec3) -> Vec3 {
    let flip = if d.z.abs() > 1e-12 {
        d.z < 0.0
    } else if d.x.abs() > 1e-12 {
        d.x < 0.0
    } else {
        d.y < 0.0
    };
    if flip {
        -d
    } else {
        d
    }
}

/// Two-frame baseline: the axis through the 3D ellipse centers of two
/// detections on distinct planes, based at the later center. The direction
/// sign follows `prev_dir` when given, else the `+z` hemisphere.
pub fn baseline_linefit(
    e1: &EllipseParams,
    p1: &ScanPlane,
    e2: &EllipseParams,
    p2: &ScanPlane,
    prev_dir: Option<&Vec3>,
) -> Result<ToolAxis, TrackerError> {
    let c1 = p1.pixel_to_3d(e1.center_col, e1.center_row);
    let c2 = p2.pixel_to_3d(e2.center_col, e2.center_row);
    let sep = (c2 - c1).norm();
    if sep <= BASELINE_MIN_SEPARATION_MM {
        return Err(TrackerError::DegenerateBaseline { separation: sep });
    }
    let mut dir = (c2 - c1) / sep;
    match prev_dir {
        Some(pd) if dir.dot(pd) < 0.0 => dir = -dir,
        Some(_) => {}
        None => dir = hemisphere_dir(dir),
    }
    let (theta, phi) = angles_from_direction(&dir);
    Ok(ToolAxis::new(c2, theta, phi))
}

/// Constant-velocity propagation without plane re-basing; the emitted pose
/// when the re-based prediction is unavailable (singular geometry, bad Δt).
fn propagate_unrebased(s: &NeedleState, dt: f64) -> NeedleState {
    let dt = dt.max(0.0);
    let mut out = NeedleState {
        x: s.x + s.xdot * dt,
        theta: s.theta + s.thetadot * dt,
        phi: s.phi + s.phidot * dt,
        ..*s
    };
    out.fold();
    out
}

/// Sequential filter pass over pre-computed detections.
pub fn assemble(detections: Vec<FrameDetection>, cfg: &TrackerConfig) -> TrackerOutput {
    let mut frames = Vec::with_capacity(detections.len());
    let mut eye_points = Vec::new();
    let mut belief: Option<Belief> = None;
    let mut last_t = 0.0f64;
    let mut init_centers: Vec<Vec3> = Vec::new();
    let mut prev_det: Option<(EllipseParams, ScanPlane)> = None;
    let mut prev_base_dir: Option<Vec3> = None;

    for mut d in detections {
        eye_points.append(&mut d.eye_points);
        let mut rec = FrameRecord {
            index: d.index,
            t: d.t,
            slot: d.slot,
            plane: d.plane.clone(),
            found: d.ellipse.is_some(),
            forced_fail: d.forced_fail,
            skipped: true,
            ekf: None,
            mahalanobis: None,
            gated: false,
            ekf_error: None,
            baseline: None,
            baseline_degenerate: false,
            ellipse: d.ellipse,
            diag: d.diag,
        };

        if let Some(e) = &rec.ellipse {
            if let Some((pe, pp)) = &prev_det {
                match baseline_linefit(pe, pp, e, &d.plane, prev_base_dir.as_ref()) {
                    Ok(axis) => {
                        prev_base_dir = Some(axis.direction());
                        rec.baseline = Some(axis);
                    }
                    Err(_) => rec.baseline_degenerate = true,
                }
            }
            prev_det = Some((*e, d.plane.clone()));
        }

        match (&mut belief, d.center3d) {
            (None, Some(c)) => {
                init_centers.push(c);
                if init_centers.len() >= cfg.init_window.max(2) {
                    match ekf::initialize(&init_centers, &d.plane) {
                        Ok(b) => {
                            rec.ekf = Some(EkfPose {
                                state: b.state,
                                trace_p: b.p.trace(),
                                extrapolated: false,
                            });
                            rec.skipped = false;
                            last_t = d.t;
                            belief = Some(b);
                        }
                        Err(err) => {
                            rec.ekf_error = Some(err.to_string());
                            init_centers.remove(0);
                        }
                    }
                }
            }
            (None, None) => {}
            (Some(b), det_center) => {
                let dt = d.t - last_t;
                let u = ControlInput::from_plane(&d.plane, dt);
                match ekf::predict(b, &u, &cfg.noise) {
                    Ok(pb) => {
                        let mut committed = false;
                        if let Some(e) = &rec.ellipse {
                            let z = ekf::sign_resolve(e, &d.plane, &pb.state);
                            match ekf::update(&pb, &z, &d.plane, &cfg.noise) {
                                Ok(ur) if !ur.gated => {
                                    rec.mahalanobis = Some(ur.mahalanobis);
                                    rec.ekf = Some(EkfPose {
                                        state: ur.belief.state,
                                        trace_p: ur.belief.p.trace(),
                                        extrapolated: false,
                                    });
                                    rec.skipped = false;
                                    *b = ur.belief;
                                    last_t = d.t;
                                    committed = true;
                                }
                                Ok(ur) => {
                                    rec.gated = true;
                                    rec.mahalanobis = Some(ur.mahalanobis);
                                }
                                Err(err) => rec.ekf_error = Some(err.to_string()),
                            }
                        }
                        if !committed && rec.ekf.is_none() {
                            // Prediction-only pose; the belief is left
                            // untouched so Δt keeps accumulating.
                            rec.ekf = Some(EkfPose {
                                state: pb.state,
                                trace_p: pb.p.trace(),
                                extrapolated: true,
                            });
                        }
                        let _ = det_center;
                    }
                    Err(err) => {
                        rec.ekf_error = Some(err.to_string());
                        rec.ekf = Some(EkfPose {
                            state: propagate_unrebased(&b.state, dt),
                            trace_p: b.p.trace(),
                            extrapolated: true,
                        });
                    }
                }
            }
        }
        frames.push(rec);
    }
    TrackerOutput { frames, eye_points }
}

/// Full tracker run: detection followed by the filter pass.
pub fn run(manifest: &Manifest, cfg: &TrackerConfig) -> Result<TrackerOutput, TrackerError> {
    Ok(assemble(detect_all(manifest, cfg)?, cfg))
}

pub const CSV_HEADER: &str = "t,x,y,z,theta,phi,xdot,ydot,zdot,thetadot,phidot,trace_P,\
innovation_mahalanobis,skipped_flag,found,extrapolated,gated,baseline_valid,\
baseline_x,baseline_y,baseline_z,baseline_theta,baseline_phi";

impl TrackerOutput {
    /// One CSV row per frame; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        let num = |out: &mut String, v: Option<f64>| {
            if let Some(x) = v {
                write!(out, "{x}").unwrap();
            }
            out.push(',');
        };
        let flag = |out: &mut String, b: bool| {
            out.push(if b { '1' } else { '0' });
            out.push(',');
        };
        for f in &self.frames {
            write!(s, "{},", f.t).unwrap();
            let st = f.ekf.as_ref().map(|e| e.state);
            for i in 0..10 {
                num(&mut s, st.map(|st| st.as_vector()[i]));
            }
            num(&mut s, f.ekf.as_ref().map(|e| e.trace_p));
            num(&mut s, f.mahalanobis);
            flag(&mut s, f.skipped);
            flag(&mut s, f.found);
            flag(&mut s, f.ekf.as_ref().is_some_and(|e| e.extrapolated));
            flag(&mut s, f.gated);
            flag(&mut s, f.baseline.is_some());
            let b = f.baseline.as_ref();
            num(&mut s, b.map(|a| a.base.x));
            num(&mut s, b.map(|a| a.base.y));
            num(&mut s, b.map(|a| a.base.z));
            num(&mut s, b.map(|a| a.theta));
            num(&mut s, b.map(|a| a.phi));
            s.pop();
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_csv())
    }
}

/// Signed `(Δθ, Δφ)` of an estimated axis against truth, rad, after flipping
/// the estimate into the truth direction's hemisphere.
pub fn aligned_angle_errors(est: &ToolAxis, truth: &ToolAxis) -> (f64, f64) {
    let mut d = est.direction();
    let td = truth.direction();
    if d.dot(&td) < 0.0 {
        d = -d;
    }
    let (te, pe) = angles_from_direction(&d);
    let (tt, pt) = angles_from_direction(&td);
    (te - tt, wrap_angle(pe - pt))
}

/// Unsigned angle between two axis directions, rad.
pub fn axis_angle(a: &ToolAxis, b: &ToolAxis) -> f64 {
    a.direction().dot(&b.direction()).abs().clamp(0.0, 1.0).acos()
}

/// Distance from a point to an axis line, mm.
pub fn point_axis_distance(p: &Vec3, axis: &ToolAxis) -> f64 {
    (p - axis.base).cross(&axis.direction()).norm()
}

/// Per-estimator error aggregate against ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct AxisErrorStats {
    pub n: usize,
    pub theta_err_mean_deg: f64,
    pub theta_err_std_deg: f64,
    pub phi_err_mean_deg: f64,
    pub phi_err_std_deg: f64,
    pub axis_dist_mean_mm: f64,
    pub axis_dist_std_mm: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn axis_stats(pairs: &[(ToolAxis, ToolAxis)]) -> Option<AxisErrorStats> {
    if pairs.is_empty() {
        return None;
    }
    let mut dts = Vec::with_capacity(pairs.len());
    let mut dps = Vec::with_capacity(pairs.len());
    let mut dds = Vec::with_capacity(pairs.len());
    for (est, truth) in pairs {
        let (dt, dp) = aligned_angle_errors(est, truth);
        dts.push(dt.to_degrees());
        dps.push(dp.to_degrees());
        dds.push(point_axis_distance(&est.base, truth));
    }
    let (tm, ts) = mean_std(&dts);
    let (pm, ps) = mean_std(&dps);
    let (dm, ds) = mean_std(&dds);
    Some(AxisErrorStats {
        n: pairs.len(),
        theta_err_mean_deg: tm,
        theta_err_std_deg: ts,
        phi_err_mean_deg: pm,
        phi_err_std_deg: ps,
        axis_dist_mean_mm: dm,
        axis_dist_std_mm: ds,
    })
}

/// Per-sequence aggregate written next to the CSV trace. Error statistics
/// need ground truth and cover every frame where the estimator emits a pose
/// (extrapolated EKF frames included).
#[derive(Debug, Clone, Serialize)]
pub struct TrackSummary {
    pub n_frames: usize,
    pub n_found: usize,
    pub n_forced_fail: usize,
    pub n_skipped: usize,
    pub n_gated: usize,
    pub n_baseline: usize,
    pub ekf: Option<AxisErrorStats>,
    pub baseline: Option<AxisErrorStats>,
}

pub fn summarize(out: &TrackerOutput, truth: Option<&TruthFile>) -> TrackSummary {
    let mut ekf_pairs = Vec::new();
    let mut base_pairs = Vec::new();
    if let Some(truth) = truth {
        for (f, tf) in out.frames.iter().zip(&truth.frames) {
            let ta = tf.axis();
            if let Some(e) = &f.ekf {
                ekf_pairs.push((e.state.axis(), ta));
            }
            if let Some(b) = &f.baseline {
                base_pairs.push((*b, ta));
            }
        }
    }
    TrackSummary {
        n_frames: out.frames.len(),
        n_found: out.frames.iter().filter(|f| f.found).count(),
        n_forced_fail: out.frames.iter().filter(|f| f.forced_fail).count(),
        n_skipped: out.frames.iter().filter(|f| f.skipped).count(),
        n_gated: out.frames.iter().filter(|f| f.gated).count(),
        n_baseline: out.frames.iter().filter(|f| f.baseline.is_some()).count(),
        ekf: axis_stats(&ekf_pairs),
        baseline: axis_stats(&base_pairs),
    }
}

/// RANSAC-fitted target sphere.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TargetSurface {
    pub center: Vec3,
    pub radius_mm: f64,
    pub inliers: usize,
}

/// Sphere through four points via the algebraic form
/// `x·x + D x + E y + F z + G = 0`; `None` for (near-)coplanar quadruples.
fn sphere_through(pts: [&Vec3; 4]) -> Option<(Vec3, f64)> {
    let mut m = Matrix4::zeros();
    let mut b = Vector4::zeros();
    for (i, p) in pts.iter().enumerate() {
        m[(i, 0)] = p.x;
        m[(i, 1)] = p.y;
        m[(i, 2)] = p.z;
        m[(i, 3)] = 1.0;
        b[i] = -p.norm_squared();
    }
    let sol = m.lu().solve(&b)?;
    sphere_from_algebraic(&sol)
}

fn sphere_from_algebraic(sol: &Vector4<f64>) -> Option<(Vec3, f64)> {
    let center = Vec3::new(-sol[0] / 2.0, -sol[1] / 2.0, -sol[2] / 2.0);
    let r2 = center.norm_squared() - sol[3];
    if !(r2 > 0.0) {
        return None;
    }
    let r = r2.sqrt();
    // A plane is the infinite-radius limit; coplanar data drives the solve
    // toward huge spheres, which must not count as a surface.
    (r.is_finite() && r < SPHERE_RADIUS_MAX_MM).then_some((center, r))
}

fn sphere_inliers(points: &[Vec3], center: &Vec3, r: f64) -> usize {
    points.iter().filter(|p| ((*p - center).norm() - r).abs() <= SPHERE_INLIER_MM).count()
}

/// Robust sphere fit to reprojected tissue-surface points: 4-point RANSAC
/// hypotheses at a 30 µm inlier threshold, then an algebraic least-squares
/// refit on the consensus set.
pub fn fit_target_surface(points: &[Vec3], rng: &mut impl Rng) -> Result<TargetSurface, TrackerError> {
    if points.len() < 4 {
        return Err(TrackerError::DegenerateSurface {
            why: format!("{} points, need at least 4", points.len()),
        });
    }
    const ITERATIONS: usize = 200;
    let needed = (points.len() / 2).max(4);
    let mut best: Option<(Vec3, f64, usize)> = None;
    for _ in 0..ITERATIONS {
        let idx = rand::seq::index::sample(rng, points.len(), 4);
        let quad = [&points[idx.index(0)], &points[idx.index(1)], &points[idx.index(2)], &points[idx.index(3)]];
        let Some((c, r)) = sphere_through(quad) else {
            continue;
        };
        let support = sphere_inliers(points, &c, r);
        if best.as_ref().is_none_or(|b| support > b.2) {
            best = Some((c, r, support));
        }
    }
    let (c0, r0, support) = best.ok_or_else(|| TrackerError::DegenerateSurface {
        why: "no sphere hypothesis found (coplanar points?)".into(),
    })?;
    if support < needed {
        return Err(TrackerError::DegenerateSurface {
            why: format!("best hypothesis explains {support} of {needed} required points"),
        });
    }
    // Least-squares refit of the algebraic form on the consensus set.
    let mut ata = Matrix4::zeros();
    let mut atb = Vector4::zeros();
    for p in points {
        if ((p - c0).norm() - r0).abs() > SPHERE_INLIER_MM {
            continue;
        }
        let row = Vector4::new(p.x, p.y, p.z, 1.0);
        ata += row * row.transpose();
        atb += row * -p.norm_squared();
    }
    let refined = ata
        .lu()
        .solve(&atb)
        .and_then(|sol| sphere_from_algebraic(&sol))
        .unwrap_or((c0, r0));
    let inliers = sphere_inliers(points, &refined.0, refined.1);
    Ok(TargetSurface { center: refined.0, radius_mm: refined.1, inliers })
}

/// Axis–sphere intersection for guidance.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Injection {
    /// Intersection on the needle-tip side, mm.
    pub point: Vec3,
    /// Signed distance of `point` along the axis direction, mm.
    pub tau: f64,
    /// Both quadratic roots, ascending.
    pub roots: [f64; 2],
}

/// Intersects the tool axis with the target sphere: the smaller root with
/// `τ > 0` when one exists (entry point ahead of the base), otherwise the
/// root nearest along the direction of travel.
pub fn injection_point(axis: &ToolAxis, surf: &TargetSurface) -> Result<Injection, TrackerError> {
    let l = axis.direction();
    let m = axis.base - surf.center;
    let b = m.dot(&l);
    let c = m.norm_squared() - surf.radius_mm * surf.radius_mm;
    let disc = b * b - c;
    if disc < 0.0 {
        let miss = (m.norm_squared() - b * b).max(0.0).sqrt() - surf.radius_mm;
        return Err(TrackerError::NoIntersection { miss });
    }
    let s = disc.sqrt();
    let (t1, t2) = (-b - s, -b + s);
    let tau = if t1 > 0.0 { t1 } else { t2 };
    Ok(Injection { point: axis.point_at(tau), tau, roots: [t1, t2] })
}
