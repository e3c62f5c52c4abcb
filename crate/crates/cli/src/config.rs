//! TOML run configuration.
//!
//! One file describes a whole experiment: scene, scan pattern, motion script,
//! rendering noise, and optional detection / filter overrides. Unknown keys
//! are rejected at every level and numeric fields are checked against their
//! documented ranges before anything runs.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use oct_track::detect::{DetectConfig, SurfaceModel};
use oct_track::ekf::{Meas, MeasMat, NoiseConfig};
use oct_track::synth::{
    build_scene, MotionConfig, NeedleConfig, NoiseParams, PatternConfig, PatternKind, ScanPattern,
    SceneTruth, TissueConfig,
};
use oct_track::tracker::TrackerConfig;

use crate::{validation, CliError};

/// Detection parameter overrides. Fields left out keep the per-plane derived
/// defaults; setting any field (or requesting pathology exclusion) switches
/// the tracker to one explicit config shared by every plane of the pattern.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    /// Tissue surface model: "circle" or "poly4".
    pub surface_model: Option<String>,
    pub d_min_px: Option<f64>,
    pub kernel_px: Option<usize>,
    pub tissue_inlier_px: Option<f64>,
    pub tissue_iterations: Option<usize>,
    pub tissue_min_support: Option<usize>,
    pub tissue_min_frac: Option<f64>,
    pub sampson_px: Option<f64>,
    pub ellipse_iterations: Option<usize>,
    pub ellipse_min_inliers: Option<usize>,
    pub refine_residual_max: Option<f64>,
    pub fallback_value_min: Option<u8>,
}

impl DetectSection {
    pub fn is_empty(&self) -> bool {
        self.surface_model.is_none()
            && self.d_min_px.is_none()
            && self.kernel_px.is_none()
            && self.tissue_inlier_px.is_none()
            && self.tissue_iterations.is_none()
            && self.tissue_min_support.is_none()
            && self.tissue_min_frac.is_none()
            && self.sampson_px.is_none()
            && self.ellipse_iterations.is_none()
            && self.ellipse_min_inliers.is_none()
            && self.refine_residual_max.is_none()
            && self.fallback_value_min.is_none()
    }

    fn apply(&self, d: &mut DetectConfig) {
        if let Some(m) = &self.surface_model {
            d.surface_model = match m.as_str() {
                "poly4" => SurfaceModel::Poly4,
                _ => SurfaceModel::Circle,
            };
        }
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    d.$field = v;
                }
            };
        }
        set!(d_min_px);
        set!(kernel_px);
        set!(tissue_inlier_px);
        set!(tissue_iterations);
        set!(tissue_min_support);
        set!(tissue_min_frac);
        set!(sampson_px);
        set!(ellipse_iterations);
        set!(ellipse_min_inliers);
        set!(refine_residual_max);
        set!(fallback_value_min);
    }
}

/// Filter and sequencing parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSection {
    pub init_window: usize,
    pub pathology_exclusion: bool,
    /// χ² innovation gate threshold; omitted = gating off.
    pub gate_chi2: Option<f64>,
    /// Positional acceleration noise, mm/s².
    pub sigma_ax: f64,
    /// Angular acceleration noise, °/s².
    pub sigma_atheta_deg: f64,
    pub sigma_aphi_deg: f64,
    /// Measurement covariance diagonal (x, y, z mm²; cos²; (n·l)²).
    pub r_diag: Option<[f64; 5]>,
    pub eye_point_stride: usize,
    pub force_fail_slots: Vec<usize>,
    pub force_fail_frames: Vec<usize>,
}

impl Default for TrackSection {
    fn default() -> Self {
        let noise = NoiseConfig::default();
        Self {
            init_window: 2,
            pathology_exclusion: false,
            gate_chi2: None,
            sigma_ax: noise.sigma_ax,
            sigma_atheta_deg: noise.sigma_atheta.to_degrees(),
            sigma_aphi_deg: noise.sigma_aphi.to_degrees(),
            r_diag: None,
            eye_point_stride: 8,
            force_fail_slots: Vec::new(),
            force_fail_frames: Vec::new(),
        }
    }
}

/// Whole-experiment configuration, one TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: rendering noise and detection RANSAC streams.
    #[serde(default)]
    pub seed: u64,
    /// Number of B-scans to render.
    pub frames: usize,
    #[serde(default)]
    pub needle: NeedleConfig,
    pub pattern: PatternConfig,
    pub tissue: Option<TissueConfig>,
    pub motion: MotionConfig,
    #[serde(default)]
    pub noise: NoiseParams,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub track: TrackSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks over every numeric field; all violations are reported at
    /// once rather than one per run.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };

        check(
            self.frames >= 1 && self.frames <= 1_000_000,
            format!("frames = {} outside 1..=1000000", self.frames),
        );
        let n = &self.needle;
        check(
            n.radius_mm > 0.0 && n.radius_mm <= 10.0,
            format!("needle.radius_mm = {} outside (0, 10]", n.radius_mm),
        );
        check(
            n.arc_thickness_px >= 0.0 && n.arc_thickness_px <= 50.0,
            format!("needle.arc_thickness_px = {} outside [0, 50]", n.arc_thickness_px),
        );

        let p = &self.pattern;
        check(p.count >= 1 && p.count <= 64, format!("pattern.count = {} outside 1..=64", p.count));
        if matches!(p.kind, PatternKind::Parallel) && p.count > 1 {
            check(
                p.spacing_mm > 0.0 && p.spacing_mm <= 10.0,
                format!("pattern.spacing_mm = {} outside (0, 10]", p.spacing_mm),
            );
        }
        if matches!(p.kind, PatternKind::Rotated) && p.count > 1 {
            check(p.step_deg != 0.0, "pattern.step_deg must be nonzero for a rotated pattern".into());
        }
        for (v, name) in [(p.size_px[0], "cols"), (p.size_px[1], "rows")] {
            check(
                (64..=8192).contains(&v),
                format!("pattern.size_px {name} = {v} outside 64..=8192"),
            );
        }
        for v in p.px_um {
            check(v > 0.0 && v <= 100.0, format!("pattern.px_um entry = {v} outside (0, 100]"));
        }
        check(
            p.a_scan_rate_hz > 0.0 && p.a_scan_rate_hz <= 1e7,
            format!("pattern.a_scan_rate_hz = {} outside (0, 1e7]", p.a_scan_rate_hz),
        );
        check(
            p.a_scans_per_bscan >= 1,
            "pattern.a_scans_per_bscan must be at least 1".into(),
        );

        let nz = &self.noise;
        check(
            (0.0..=2.0).contains(&nz.speckle_sigma),
            format!("noise.speckle_sigma = {} outside [0, 2]", nz.speckle_sigma),
        );
        check(
            (0.0..=64.0).contains(&nz.gaussian_sigma),
            format!("noise.gaussian_sigma = {} outside [0, 64]", nz.gaussian_sigma),
        );
        check(
            (0.0..=0.1).contains(&nz.salt_pepper),
            format!("noise.salt_pepper = {} outside [0, 0.1]", nz.salt_pepper),
        );

        if let Some(t) = &self.tissue {
            check(
                t.thickness_px > 0.0 && t.thickness_px <= 512.0,
                format!("tissue.thickness_px = {} outside (0, 512]", t.thickness_px),
            );
        }

        check(!self.motion.keyframes.is_empty(), "motion.keyframes must not be empty".into());
        for k in &self.motion.keyframes {
            check(
                k.theta_deg > 0.0 && k.theta_deg < 180.0,
                format!("motion keyframe theta_deg = {} outside (0, 180)", k.theta_deg),
            );
        }
        // The schedule starts at t = 0 and the script refuses extrapolation,
        // so the keyframes must cover the whole acquisition.
        if let (Some(first), Some(last)) = (self.motion.keyframes.first(), self.motion.keyframes.last()) {
            if p.a_scan_rate_hz > 0.0 && p.a_scans_per_bscan >= 1 && self.frames >= 1 {
                let t_end = (self.frames - 1) as f64 * p.a_scans_per_bscan as f64 / p.a_scan_rate_hz;
                check(first.t_s <= 0.0, format!("motion starts at t = {} s, after frame 0", first.t_s));
                check(
                    last.t_s >= t_end - 1e-9,
                    format!("motion ends at t = {} s but frame {} is at {t_end:.4} s", last.t_s, self.frames - 1),
                );
            }
        }

        let d = &self.detect;
        if let Some(m) = &d.surface_model {
            check(
                m == "circle" || m == "poly4",
                format!("detect.surface_model = {m:?}, expected \"circle\" or \"poly4\""),
            );
        }
        let in_range = |v: Option<f64>, lo: f64, hi: f64, name: &str, bad: &mut Vec<String>| {
            if let Some(v) = v {
                if !(v > lo && v <= hi) {
                    bad.push(format!("detect.{name} = {v} outside ({lo}, {hi}]"));
                }
            }
        };
        in_range(d.d_min_px, 0.0, 200.0, "d_min_px", &mut bad);
        in_range(d.tissue_inlier_px, 0.0, 50.0, "tissue_inlier_px", &mut bad);
        in_range(d.sampson_px, 0.0, 50.0, "sampson_px", &mut bad);
        in_range(d.refine_residual_max, 0.0, 100.0, "refine_residual_max", &mut bad);
        let mut check = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        if let Some(k) = d.kernel_px {
            check(k % 2 == 1 && (3..=99).contains(&k), format!("detect.kernel_px = {k} must be odd and within 3..=99"));
        }
        if let Some(v) = d.tissue_iterations {
            check((1..=1_000_000).contains(&v), format!("detect.tissue_iterations = {v} outside 1..=1000000"));
        }
        if let Some(v) = d.ellipse_iterations {
            check((1..=1_000_000).contains(&v), format!("detect.ellipse_iterations = {v} outside 1..=1000000"));
        }
        if let Some(v) = d.tissue_min_support {
            check(v >= 4, format!("detect.tissue_min_support = {v} must be at least 4"));
        }
        if let Some(v) = d.tissue_min_frac {
            check((0.0..=1.0).contains(&v), format!("detect.tissue_min_frac = {v} outside [0, 1]"));
        }
        if let Some(v) = d.ellipse_min_inliers {
            check(v >= 6, format!("detect.ellipse_min_inliers = {v} must be at least 6"));
        }

        let t = &self.track;
        check(
            (2..=32).contains(&t.init_window),
            format!("track.init_window = {} outside 2..=32", t.init_window),
        );
        if let Some(g) = t.gate_chi2 {
            check(g.is_finite() && g > 0.0, format!("track.gate_chi2 = {g} must be a positive number"));
        }
        for (v, name) in [
            (t.sigma_ax, "sigma_ax"),
            (t.sigma_atheta_deg, "sigma_atheta_deg"),
            (t.sigma_aphi_deg, "sigma_aphi_deg"),
        ] {
            check(v > 0.0 && v <= 1e4, format!("track.{name} = {v} outside (0, 1e4]"));
        }
        if let Some(r) = t.r_diag {
            for v in r {
                check(v.is_finite() && v > 0.0, format!("track.r_diag entry = {v} must be positive"));
            }
        }
        check(t.eye_point_stride >= 1, "track.eye_point_stride must be at least 1".into());
        let n_slots = match self.pattern.kind {
            PatternKind::Cross => 2,
            _ => self.pattern.count,
        };
        for s in &t.force_fail_slots {
            check(*s < n_slots, format!("track.force_fail_slots entry {s} exceeds slot count {n_slots}"));
        }

        if bad.is_empty() {
            Ok(())
        } else {
            Err(validation(format!("invalid config:\n  {}", bad.join("\n  "))))
        }
    }

    pub fn pattern(&self) -> Result<ScanPattern, CliError> {
        self.pattern.build().map_err(validation)
    }

    /// Scene with the rendering noise reseeded from the run seed.
    pub fn scene(&self, seed: u64) -> Result<SceneTruth, CliError> {
        let mut noise = self.noise;
        noise.seed = seed;
        build_scene(&self.needle, self.tissue.as_ref(), &self.motion, noise, &self.pattern)
            .map_err(validation)
    }

    /// Tracker configuration with the detection / filter overrides applied.
    /// `pathology` is OR-ed with the config flag (the CLI flag can only turn
    /// the exclusion pass on).
    pub fn tracker_config(&self, seed: u64, pathology: bool) -> Result<TrackerConfig, CliError> {
        let mut cfg = TrackerConfig::new(self.needle.radius_mm);
        cfg.seed = seed;
        cfg.pathology_exclusion = pathology || self.track.pathology_exclusion;
        cfg.init_window = self.track.init_window;
        cfg.eye_point_stride = self.track.eye_point_stride;
        cfg.force_fail_slots = self.track.force_fail_slots.clone();
        cfg.force_fail_frames = self.track.force_fail_frames.clone();
        cfg.noise.sigma_ax = self.track.sigma_ax;
        cfg.noise.sigma_atheta = self.track.sigma_atheta_deg.to_radians();
        cfg.noise.sigma_aphi = self.track.sigma_aphi_deg.to_radians();
        cfg.noise.gate_chi2 = self.track.gate_chi2;
        if let Some(r) = self.track.r_diag {
            cfg.noise.r = MeasMat::from_diagonal(&Meas::from(r));
        }
        if !self.detect.is_empty() {
            // All planes of a pattern share pixel geometry, so one explicit
            // config derived from the first template covers every slot.
            let pattern = self.pattern()?;
            let mut d = DetectConfig::for_plane(self.needle.radius_mm, &pattern.templates[0]);
            d.pathology_exclusion = cfg.pathology_exclusion;
            self.detect.apply(&mut d);
            cfg.detect = Some(d);
        }
        Ok(cfg)
    }
}
