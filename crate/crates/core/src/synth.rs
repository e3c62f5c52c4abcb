//! Synthetic B-scan sequences with exact ground truth.
//!
//! A scene couples a moving needle (ideal cylinder), an optional tissue
//! curve, and a scan pattern. Per frame the renderer draws the tissue layer,
//! the upper half of the needle cross-section ellipse at saturating
//! intensity, the shadow beneath it, and finally speckle/Gaussian/salt-pepper
//! noise. Every frame draws from its own RNG stream, so sequences are
//! bit-reproducible regardless of render order.

use std::fs;
use std::io::{self, Read, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{cylinder_section, GeometryError, ScanPlane, ToolAxis, Vec3};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("motion script time {t} outside keyframe range [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("invalid {what}: {why}")]
    InvalidConfig { what: &'static str, why: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {why}", path.display())]
    Format { path: PathBuf, why: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path, source: io::Error) -> SynthError {
    SynthError::Io { path: path.to_owned(), source }
}

fn invalid(what: &'static str, why: impl Into<String>) -> SynthError {
    SynthError::InvalidConfig { what, why: why.into() }
}

/// 8-bit B-scan image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BScan {
    pub n_cols: usize,
    pub n_rows: usize,
    pub data: Vec<u8>,
}

impl BScan {
    pub fn new(n_cols: usize, n_rows: usize) -> Self {
        Self { n_cols, n_rows, data: vec![0; n_cols * n_rows] }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.data[row * self.n_cols + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: u8) {
        self.data[row * self.n_cols + col] = v;
    }

    /// Binary PGM (P5), maxval 255.
    pub fn write_pgm(&self, w: &mut impl IoWrite) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.n_cols, self.n_rows)?;
        w.write_all(&self.data)
    }

    pub fn read_pgm(r: &mut impl Read) -> io::Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |why: &str| io::Error::new(io::ErrorKind::InvalidData, why.to_string());
        let mut pos = 0usize;
        let mut token = |buf: &[u8]| -> io::Result<String> {
            while pos < buf.len() {
                match buf[pos] {
                    b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                    b'#' => while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    },
                    _ => break,
                }
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
        };
        if token(&buf)? != "P5" {
            return Err(bad("not a binary PGM (P5) file"));
        }
        let n_cols: usize = token(&buf)?.parse().map_err(|_| bad("bad width"))?;
        let n_rows: usize = token(&buf)?.parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = token(&buf)?.parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        pos += 1;
        let need = n_cols * n_rows;
        if buf.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        Ok(Self { n_cols, n_rows, data: buf[pos..pos + need].to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        self.write_pgm(&mut f).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
        Self::read_pgm(&mut f).map_err(|e| io_err(path, e))
    }
}

/// Which half of a circle the tissue curve follows: `Upper` bends away from
/// the scanner at the image edges (concave bowl), `Lower` toward it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueKind {
    Circle,
    Poly4,
}

/// Gaussian elevation added to the tissue curve (toward the scanner).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center_col: f64,
    pub width_px: f64,
    pub height_px: f64,
}

/// Tissue layer in image pixel coordinates, identical in every plane of the
/// pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueModel {
    pub kind: TissueKind,
    /// Circle center `(col, row)` px; unused for poly4.
    pub center_px: [f64; 2],
    /// Circle radius px; unused for poly4.
    pub radius_px: f64,
    pub branch: Branch,
    /// Coefficients of `row = Σ a_k col^k`; unused for circle.
    pub poly: [f64; 5],
    pub bumps: Vec<Bump>,
    pub reflectivity: u8,
    pub thickness_px: f64,
}

impl TissueModel {
    /// Curve row before bumps; `None` outside the circle's column domain.
    pub fn base_row(&self, col: f64) -> Option<f64> {
        match self.kind {
            TissueKind::Circle => {
                let dx = col - self.center_px[0];
                let d2 = self.radius_px * self.radius_px - dx * dx;
                if d2 < 0.0 {
                    return None;
                }
                Some(match self.branch {
                    Branch::Upper => self.center_px[1] - d2.sqrt(),
                    Branch::Lower => self.center_px[1] + d2.sqrt(),
                })
            }
            TissueKind::Poly4 => {
                let mut acc = 0.0;
                for &a in self.poly.iter().rev() {
                    acc = acc * col + a;
                }
                Some(acc)
            }
        }
    }

    /// Curve row with bump elevation applied (bumps rise toward row 0).
    pub fn surface_row(&self, col: f64) -> Option<f64> {
        let mut row = self.base_row(col)?;
        for b in &self.bumps {
            let d = (col - b.center_col) / b.width_px;
            row -= b.height_px * (-0.5 * d * d).exp();
        }
        Some(row)
    }

    /// Curve plus layer must fit inside the image rows at every column.
    pub fn validate(&self, n_cols: usize, n_rows: usize) -> Result<(), SynthError> {
        for c in 0..n_cols {
            match self.surface_row(c as f64) {
                None => {
                    return Err(invalid(
                        "tissue",
                        format!("circle does not span column {c} (radius too small)"),
                    ))
                }
                Some(r) => {
                    if r < 0.0 || r + self.thickness_px > n_rows as f64 {
                        return Err(invalid(
                            "tissue",
                            format!("curve leaves image rows at column {c} (row {r:.1})"),
                        ));
                    }
                }
            }
        }
        if self.thickness_px <= 0.0 {
            return Err(invalid("tissue", "thickness_px must be positive"));
        }
        Ok(())
    }
}

/// Timestamped needle pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub t: f64,
    pub base: Vec3,
    pub theta: f64,
    pub phi: f64,
}

/// Piecewise-linear needle trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScript {
    keyframes: Vec<Keyframe>,
}

impl MotionScript {
    pub fn new(keyframes: Vec<Keyframe>) -> Result<Self, SynthError> {
        if keyframes.is_empty() {
            return Err(invalid("motion", "at least one keyframe required"));
        }
        for w in keyframes.windows(2) {
            if w[1].t <= w[0].t {
                return Err(invalid("motion", "keyframe timestamps must strictly increase"));
            }
        }
        Ok(Self { keyframes })
    }

    /// Constant pose over `[0, t_end]`.
    pub fn static_pose(axis: ToolAxis, t_end: f64) -> Self {
        let k = |t| Keyframe { t, base: axis.base, theta: axis.theta, phi: axis.phi };
        Self { keyframes: vec![k(0.0), k(t_end.max(1e-9))] }
    }

    pub fn t_range(&self) -> (f64, f64) {
        (self.keyframes[0].t, self.keyframes[self.keyframes.len() - 1].t)
    }

    /// Linear interpolation in `(x, θ, φ)`; exact at keyframes; errors
    /// outside the keyframe range rather than clamping silently.
    pub fn pose_at(&self, t: f64) -> Result<ToolAxis, SynthError> {
        let (t0, t1) = self.t_range();
        if t < t0 - 1e-9 || t > t1 + 1e-9 {
            return Err(SynthError::OutOfRange { t, t0, t1 });
        }
        let t = t.clamp(t0, t1);
        let i = match self.keyframes.binary_search_by(|k| k.t.partial_cmp(&t).unwrap()) {
            Ok(i) => return Ok(ToolAxis::new(self.keyframes[i].base, self.keyframes[i].theta, self.keyframes[i].phi)),
            Err(i) => i,
        };
        let (a, b) = (&self.keyframes[i - 1], &self.keyframes[i]);
        let s = (t - a.t) / (b.t - a.t);
        Ok(ToolAxis::new(
            a.base + (b.base - a.base) * s,
            a.theta + (b.theta - a.theta) * s,
            a.phi + (b.phi - a.phi) * s,
        ))
    }
}

/// Repeating set of scan plane templates plus acquisition timing.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPattern {
    pub templates: Vec<ScanPlane>,
    pub a_scan_rate_hz: f64,
    pub a_scans_per_bscan: usize,
}

impl ScanPattern {
    /// Seconds per B-scan.
    pub fn frame_period(&self) -> f64 {
        self.a_scans_per_bscan as f64 / self.a_scan_rate_hz
    }
}

/// Noise applied after geometry rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    /// Log-normal multiplicative speckle sigma.
    pub speckle_sigma: f64,
    /// Additive Gaussian sigma, intensity units.
    pub gaussian_sigma: f64,
    /// Per-pixel probability of a salt or pepper hit (split evenly).
    pub salt_pepper: f64,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { speckle_sigma: 0.3, gaussian_sigma: 8.0, salt_pepper: 5e-4, seed: 0 }
    }
}

impl NoiseParams {
    pub fn noise_free(seed: u64) -> Self {
        Self { speckle_sigma: 0.0, gaussian_sigma: 0.0, salt_pepper: 0.0, seed }
    }
}

/// Everything needed to render a ground-truthed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub radius_mm: f64,
    pub needle_reflectivity: u8,
    pub arc_thickness_px: f64,
    pub script: MotionScript,
    pub tissue: Option<TissueModel>,
    pub noise: NoiseParams,
}

/// Frame schedule: planes cycle through the pattern, timestamps advance by
/// exactly one B-scan period.
pub fn schedule_frames(pattern: &ScanPattern, duration_s: f64) -> Vec<ScanPlane> {
    let n = (duration_s / pattern.frame_period() + 1e-9).floor() as usize;
    schedule_n_frames(pattern, n)
}

pub fn schedule_n_frames(pattern: &ScanPattern, n_frames: usize) -> Vec<ScanPlane> {
    let dt = pattern.frame_period();
    (0..n_frames)
        .map(|i| {
            let mut p = pattern.templates[i % pattern.templates.len()].clone();
            p.timestamp = i as f64 * dt;
            p
        })
        .collect()
}

/// Renders one B-scan: tissue layer, needle upper arc, shadow, then noise.
pub fn render_bscan(
    scene: &SceneTruth,
    plane: &ScanPlane,
    axis: &ToolAxis,
    rng: &mut impl Rng,
) -> BScan {
    let mut img = BScan::new(plane.n_cols, plane.n_rows);

    if let Some(t) = &scene.tissue {
        for c in 0..plane.n_cols {
            if let Some(r) = t.surface_row(c as f64) {
                let start = r.round().max(0.0) as usize;
                let end = ((r + t.thickness_px).round() as usize).min(plane.n_rows);
                for row in start..end {
                    img.set(c, row, t.reflectivity);
                }
            }
        }
    }

    if let Ok(section) = cylinder_section(axis, scene.radius_mm, plane) {
        let kappa = plane.px_col_mm() / plane.px_row_mm();
        let (mu, mv) = section.major_dir_inplane(plane);
        let norm = (mu * mu + mv * mv).sqrt();
        // Degenerate in-plane projection means a circular section; any
        // orthogonal pair works.
        let (e1h, e1v) = if norm < 1e-9 { (1.0, 0.0) } else { (mu / norm, mv / norm) };
        let (e2h, e2v) = (-e1v, e1h);
        let a = section.lambda1_mm / plane.px_row_mm();
        let b = section.lambda2_mm / plane.px_row_mm();
        let h0 = section.center_px.0 * kappa;
        let w0 = section.center_px.1;
        let half_h = (a * e1h).hypot(b * e2h);
        let (h_min, h_max) = (h0 - half_h, h0 + half_h);
        // Row of the boundary's leftmost/rightmost points.
        let w_extreme = (a * a * e1h * e1v + b * b * e2h * e2v) / half_h;
        let qa = (e1v / a) * (e1v / a) + (e2v / b) * (e2v / b);
        let upper_row = |h: f64| -> Option<f64> {
            let u = h - h0;
            let qb = 2.0 * u * (e1h * e1v / (a * a) + e2h * e2v / (b * b));
            let qc = u * u * ((e1h / a) * (e1h / a) + (e2h / b) * (e2h / b)) - 1.0;
            let disc = qb * qb - 4.0 * qa * qc;
            (disc >= 0.0).then(|| w0 + (-qb - disc.sqrt()) / (2.0 * qa))
        };
        let c_lo = ((h_min - kappa / 2.0) / kappa).ceil().max(0.0) as usize;
        let c_hi = (((h_max + kappa / 2.0) / kappa).floor() as isize).min(plane.n_cols as isize - 1);
        let thickness = scene.arc_thickness_px.round().max(1.0) as isize;
        // One boundary sample per column at the column centre. The tangent
        // extremes land between centres; each is folded into its nearest
        // column so the arc keeps its full width and depth.
        let mut samples: Vec<Option<(f64, f64)>> = (c_lo as isize..=c_hi)
            .map(|c| {
                let hc = c as f64 * kappa;
                let w = upper_row(hc)?;
                (h_min <= hc && hc <= h_max).then_some((w, w))
            })
            .collect();
        for (he, we) in [(h_min, w0 - w_extreme), (h_max, w0 + w_extreme)] {
            let c = (he / kappa).round() as isize;
            if let Some(s) = (c - c_lo as isize).try_into().ok().and_then(|k: usize| samples.get_mut(k))
            {
                *s = match *s {
                    Some((top, bot)) => Some((top.min(we), bot.max(we))),
                    None => Some((we, we)),
                };
            }
        }
        for (k, sample) in samples.iter().enumerate() {
            let Some((w_top, mut w_bot)) = *sample else { continue };
            let c = c_lo + k;
            // Steep surface runs smear down to the adjacent column's depth,
            // keeping the arc connected; the top edge stays the exact
            // boundary sample.
            for adj in [k.wrapping_sub(1), k + 1] {
                if let Some(Some((t, _))) = samples.get(adj) {
                    w_bot = w_bot.max(*t);
                }
            }
            let top = w_top.round() as isize;
            let arc_end = w_bot.round() as isize + thickness;
            // Everything beneath the reflecting top surface is shadowed,
            // including the needle interior and the tissue below.
            for row in (arc_end.max(0) as usize)..plane.n_rows {
                img.set(c, row, 0);
            }
            for row in top.max(0)..arc_end.min(plane.n_rows as isize) {
                img.set(c, row as usize, scene.needle_reflectivity);
            }
        }
    }

    let n = &scene.noise;
    if n.speckle_sigma > 0.0 || n.gaussian_sigma > 0.0 || n.salt_pepper > 0.0 {
        for px in img.data.iter_mut() {
            let mut v = *px as f64;
            if n.speckle_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v *= (n.speckle_sigma * z).exp();
            }
            if n.gaussian_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += n.gaussian_sigma * z;
            }
            if n.salt_pepper > 0.0 {
                let u: f64 = rng.random();
                if u < n.salt_pepper {
                    v = if u < n.salt_pepper * 0.5 { 0.0 } else { 255.0 };
                }
            }
            *px = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    img
}

/// Pose plus rendered image for frame `idx`, using the frame's own RNG
/// stream.
pub fn render_frame(
    scene: &SceneTruth,
    plane: &ScanPlane,
    idx: usize,
) -> Result<(BScan, ToolAxis), SynthError> {
    let pose = scene.script.pose_at(plane.timestamp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise.seed);
    rng.set_stream(idx as u64);
    Ok((render_bscan(scene, plane, &pose, &mut rng), pose))
}

/// Plane placement as stored in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneRecord {
    pub p_mm: [f64; 3],
    pub n: [f64; 3],
    pub col_dir: [f64; 3],
    pub row_dir: [f64; 3],
    pub px_um: [f64; 2],
    pub size: [usize; 2],
}

impl PlaneRecord {
    pub fn from_plane(p: &ScanPlane) -> Self {
        let v = |x: &Vec3| [x.x, x.y, x.z];
        Self {
            p_mm: v(&p.origin),
            n: v(&p.normal),
            col_dir: v(&p.col_dir),
            row_dir: v(&p.row_dir),
            px_um: p.px_um,
            size: [p.n_cols, p.n_rows],
        }
    }

    pub fn to_plane(&self, timestamp: f64) -> Result<ScanPlane, GeometryError> {
        let v = |x: &[f64; 3]| Vec3::new(x[0], x[1], x[2]);
        ScanPlane::new(
            v(&self.p_mm),
            v(&self.n),
            v(&self.col_dir),
            v(&self.row_dir),
            self.px_um,
            timestamp,
            self.size[0],
            self.size[1],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: String,
    pub timestamp_s: f64,
    pub plane: PlaneRecord,
}

/// Sequence manifest: one entry per frame, in acquisition order.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the image paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| SynthError::Format { path: path.to_owned(), why: e.to_string() })?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_owned();
        Ok(Self { entries, root })
    }

    pub fn load_plane(&self, idx: usize) -> Result<ScanPlane, SynthError> {
        let e = &self.entries[idx];
        Ok(e.plane.to_plane(e.timestamp_s)?)
    }

    pub fn load_image(&self, idx: usize) -> Result<BScan, SynthError> {
        BScan::load(&self.root.join(&self.entries[idx].image_path))
    }
}

/// Per-frame ground-truth pose (motion-script base point and angles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFrame {
    pub t_s: f64,
    pub x_mm: [f64; 3],
    pub theta_rad: f64,
    pub phi_rad: f64,
}

impl TruthFrame {
    pub fn axis(&self) -> ToolAxis {
        ToolAxis::new(Vec3::new(self.x_mm[0], self.x_mm[1], self.x_mm[2]), self.theta_rad, self.phi_rad)
    }
}

/// Contents of `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub radius_mm: f64,
    pub seed: u64,
    pub tissue: Option<TissueModel>,
    pub frames: Vec<TruthFrame>,
}

impl TruthFile {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| SynthError::Format { path: path.to_owned(), why: e.to_string() })
    }
}

/// Incremental sequence writer: images as they come, manifest + truth at the
/// end. Frames must be added in index order.
pub struct SequenceWriter {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
    truth_frames: Vec<TruthFrame>,
}

impl SequenceWriter {
    pub fn create(dir: &Path) -> Result<Self, SynthError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_owned(), entries: Vec::new(), truth_frames: Vec::new() })
    }

    pub fn add_frame(
        &mut self,
        idx: usize,
        plane: &ScanPlane,
        pose: &ToolAxis,
        img: &BScan,
    ) -> Result<(), SynthError> {
        let name = format!("frame_{idx:05}.pgm");
        img.save(&self.dir.join(&name))?;
        self.entries.push(ManifestEntry {
            image_path: name,
            timestamp_s: plane.timestamp,
            plane: PlaneRecord::from_plane(plane),
        });
        self.truth_frames.push(TruthFrame {
            t_s: plane.timestamp,
            x_mm: [pose.base.x, pose.base.y, pose.base.z],
            theta_rad: pose.theta,
            phi_rad: pose.phi,
        });
        Ok(())
    }

    pub fn finish(self, scene: &SceneTruth) -> Result<Manifest, SynthError> {
        let manifest_path = self.dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        fs::write(&manifest_path, json).map_err(|e| io_err(&manifest_path, e))?;
        let truth = TruthFile {
            radius_mm: scene.radius_mm,
            seed: scene.noise.seed,
            tissue: scene.tissue.clone(),
            frames: self.truth_frames,
        };
        let truth_path = self.dir.join("truth.json");
        let json = serde_json::to_string_pretty(&truth).expect("truth serializes");
        fs::write(&truth_path, json).map_err(|e| io_err(&truth_path, e))?;
        Ok(Manifest { entries: self.entries, root: self.dir })
    }
}

/// Renders and writes a whole sequence; returns the manifest.
pub fn export_sequence(
    scene: &SceneTruth,
    frames: &[ScanPlane],
    dir: &Path,
) -> Result<Manifest, SynthError> {
    let mut w = SequenceWriter::create(dir)?;
    for (i, plane) in frames.iter().enumerate() {
        let (img, pose) = render_frame(scene, plane, i)?;
        w.add_frame(i, plane, &pose, &img)?;
    }
    w.finish(scene)
}

// ---------------------------------------------------------------------------
// TOML-facing configuration sections.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleConfig {
    pub radius_mm: f64,
    pub reflectivity: u8,
    pub arc_thickness_px: f64,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self { radius_mm: 0.205, reflectivity: 255, arc_thickness_px: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueConfig {
    pub kind: TissueKind,
    pub center_px: Option<[f64; 2]>,
    pub radius_px: Option<f64>,
    #[serde(default = "default_branch")]
    pub branch: Branch,
    pub poly: Option<[f64; 5]>,
    #[serde(default)]
    pub bumps: Vec<Bump>,
    #[serde(default = "default_tissue_reflectivity")]
    pub reflectivity: u8,
    #[serde(default = "default_tissue_thickness")]
    pub thickness_px: f64,
}

fn default_branch() -> Branch {
    Branch::Upper
}
fn default_tissue_reflectivity() -> u8 {
    180
}
fn default_tissue_thickness() -> f64 {
    30.0
}

impl TissueConfig {
    pub fn build(&self, n_cols: usize, n_rows: usize) -> Result<TissueModel, SynthError> {
        let model = match self.kind {
            TissueKind::Circle => {
                let center = self.center_px.ok_or_else(|| invalid("tissue", "circle requires center_px"))?;
                let radius = self.radius_px.ok_or_else(|| invalid("tissue", "circle requires radius_px"))?;
                if radius <= 0.0 {
                    return Err(invalid("tissue", "radius_px must be positive"));
                }
                TissueModel {
                    kind: TissueKind::Circle,
                    center_px: center,
                    radius_px: radius,
                    branch: self.branch,
                    poly: [0.0; 5],
                    bumps: self.bumps.clone(),
                    reflectivity: self.reflectivity,
                    thickness_px: self.thickness_px,
                }
            }
            TissueKind::Poly4 => {
                let poly = self.poly.ok_or_else(|| invalid("tissue", "poly4 requires poly coefficients"))?;
                TissueModel {
                    kind: TissueKind::Poly4,
                    center_px: [0.0; 2],
                    radius_px: 0.0,
                    branch: self.branch,
                    poly,
                    bumps: self.bumps.clone(),
                    reflectivity: self.reflectivity,
                    thickness_px: self.thickness_px,
                }
            }
        };
        model.validate(n_cols, n_rows)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    /// `count` planes spaced `spacing_mm` along the common normal.
    Parallel,
    /// Two perpendicular planes through the center.
    Cross,
    /// `count` planes rotated `step_deg` apart around the A-scan axis
    /// through the center.
    Rotated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    pub kind: PatternKind,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_spacing")]
    pub spacing_mm: f64,
    /// In-plane orientation of the stack: column direction azimuth, degrees.
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default = "default_step_deg")]
    pub step_deg: f64,
    /// 3D center of the image stack, mm.
    pub center_mm: [f64; 3],
    #[serde(default = "default_size")]
    pub size_px: [usize; 2],
    #[serde(default = "default_px_um")]
    pub px_um: [f64; 2],
    #[serde(default = "default_a_scan_rate")]
    pub a_scan_rate_hz: f64,
    #[serde(default = "default_a_scans")]
    pub a_scans_per_bscan: usize,
}

fn default_count() -> usize {
    5
}
fn default_spacing() -> f64 {
    0.25
}
fn default_step_deg() -> f64 {
    30.0
}
fn default_size() -> [usize; 2] {
    [1024, 512]
}
fn default_px_um() -> [f64; 2] {
    [5.0, 2.5]
}
fn default_a_scan_rate() -> f64 {
    30_000.0
}
fn default_a_scans() -> usize {
    1000
}

impl PatternConfig {
    pub fn build(&self) -> Result<ScanPattern, SynthError> {
        if self.count == 0 {
            return Err(invalid("pattern", "count must be at least 1"));
        }
        if self.a_scan_rate_hz <= 0.0 || self.a_scans_per_bscan == 0 {
            return Err(invalid("pattern", "A-scan rate and count must be positive"));
        }
        let center = Vec3::new(self.center_mm[0], self.center_mm[1], self.center_mm[2]);
        let [n_cols, n_rows] = self.size_px;
        let width = n_cols as f64 * self.px_um[0] * 1e-3;
        let height = n_rows as f64 * self.px_um[1] * 1e-3;

        let make = |azimuth_deg: f64, offset: f64| -> Result<ScanPlane, SynthError> {
            let az = azimuth_deg.to_radians();
            let col_dir = Vec3::new(az.cos(), az.sin(), 0.0);
            let normal = col_dir.cross(&Vec3::z());
            let origin = center - col_dir * (width / 2.0) - Vec3::z() * (height / 2.0) + normal * offset;
            Ok(ScanPlane::new(origin, normal, col_dir, Vec3::z(), self.px_um, 0.0, n_cols, n_rows)?)
        };

        let templates = match self.kind {
            PatternKind::Parallel => {
                let mid = (self.count as f64 - 1.0) / 2.0;
                (0..self.count)
                    .map(|i| make(self.rotation_deg, (i as f64 - mid) * self.spacing_mm))
                    .collect::<Result<Vec<_>, _>>()?
            }
            PatternKind::Cross => vec![
                make(self.rotation_deg, 0.0)?,
                make(self.rotation_deg + 90.0, 0.0)?,
            ],
            PatternKind::Rotated => (0..self.count)
                .map(|i| make(self.rotation_deg + i as f64 * self.step_deg, 0.0))
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(ScanPattern {
            templates,
            a_scan_rate_hz: self.a_scan_rate_hz,
            a_scans_per_bscan: self.a_scans_per_bscan,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeConfig {
    pub t_s: f64,
    pub x_mm: [f64; 3],
    pub theta_deg: f64,
    pub phi_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    pub keyframes: Vec<KeyframeConfig>,
}

impl MotionConfig {
    pub fn build(&self) -> Result<MotionScript, SynthError> {
        MotionScript::new(
            self.keyframes
                .iter()
                .map(|k| Keyframe {
                    t: k.t_s,
                    base: Vec3::new(k.x_mm[0], k.x_mm[1], k.x_mm[2]),
                    theta: k.theta_deg.to_radians(),
                    phi: k.phi_deg.to_radians(),
                })
                .collect(),
        )
    }
}

/// Assembles a scene from its config sections, validating against the
/// pattern's image size.
pub fn build_scene(
    needle: &NeedleConfig,
    tissue: Option<&TissueConfig>,
    motion: &MotionConfig,
    noise: NoiseParams,
    pattern: &PatternConfig,
) -> Result<SceneTruth, SynthError> {
    if needle.radius_mm <= 0.0 {
        return Err(invalid("needle", "radius_mm must be positive"));
    }
    let tissue = tissue
        .map(|t| t.build(pattern.size_px[0], pattern.size_px[1]))
        .transpose()?;
    Ok(SceneTruth {
        radius_mm: needle.radius_mm,
        needle_reflectivity: needle.reflectivity,
        arc_thickness_px: needle.arc_thickness_px,
        script: motion.build()?,
        tissue,
        noise,
    })
}
