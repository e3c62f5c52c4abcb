//! Scan-plane and tool-axis primitives plus the cylinder–plane ellipse
//! relations.
//!
//! Coordinate conventions: the A-scan (depth) direction is the global `z`
//! axis, the galvanometer deflection axes are `x` and `y`. All 3D lengths are
//! in millimetres. A B-scan plane is vertical (contains `z`); its image grid
//! is addressed as `(col, row)` with `row_dir == z` and anisotropic pixel
//! spacings given in µm/px.
//!
//! Ellipse semi-axes are stored in *axial pixel units*, i.e. metric length
//! divided by the axial (row) pixel spacing. On an isotropic grid this is the
//! ordinary pixel length; on anisotropic grids it keeps the ratio
//! `lambda2/lambda1` and the orientation `alpha` metric-correct, which is
//! what the axis recovery relies on.

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;

/// Tolerance below which `|l·n|` is treated as "axis parallel to plane".
pub const EPS_PARALLEL: f64 = 1e-6;
/// Tolerance below which the in-plane projection of the axis is degenerate.
pub const EPS_PROJECTION: f64 = 1e-9;
/// Tolerance for the orthonormality checks of a scan-plane frame.
pub const EPS_FRAME: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// The tool axis does not cross the scan plane at a usable angle.
    #[error("tool axis parallel to scan plane (|l.n| = {l_dot_n:.3e})")]
    ParallelLinePlane { l_dot_n: f64 },
    /// The axis is aligned with the plane normal; the cross-section is a
    /// circle and has no major-axis direction.
    #[error("axis aligned with plane normal; in-plane projection degenerate")]
    DegenerateProjection,
    /// The plane is tilted out of the A-scan axis; only vertical planes with
    /// `row_dir == z` are supported.
    #[error("scan plane tilted: row_dir deviates from the A-scan axis by {deviation:.3e}")]
    TiltedPlane { deviation: f64 },
    /// `normal`, `col_dir`, `row_dir` do not form an orthonormal frame.
    #[error("invalid scan plane frame: {0}")]
    InvalidFrame(String),
}

/// One B-scan's placement in 3D: origin (top-left image corner), orthonormal
/// frame, pixel spacing, image size and acquisition timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlane {
    /// Top-left corner of the B-scan image, mm.
    pub origin: Vec3,
    /// Plane normal (unit).
    pub normal: Vec3,
    /// Direction of increasing column index (unit, in-plane).
    pub col_dir: Vec3,
    /// Direction of increasing row index (unit, equals the A-scan axis `z`).
    pub row_dir: Vec3,
    /// Pixel spacing `[col, row]` in µm/px.
    pub px_um: [f64; 2],
    /// Acquisition time, seconds.
    pub timestamp: f64,
    /// Image size.
    pub n_cols: usize,
    pub n_rows: usize,
}

impl ScanPlane {
    /// Builds a plane and validates the frame: unit axes, mutual
    /// orthogonality, `normal == ±col_dir × row_dir`, and `row_dir == z`
    /// (vertical plane). Tilted planes are rejected.
    pub fn new(
        origin: Vec3,
        normal: Vec3,
        col_dir: Vec3,
        row_dir: Vec3,
        px_um: [f64; 2],
        timestamp: f64,
        n_cols: usize,
        n_rows: usize,
    ) -> Result<Self, GeometryError> {
        for (name, v) in [("normal", &normal), ("col_dir", &col_dir), ("row_dir", &row_dir)] {
            if (v.norm() - 1.0).abs() > EPS_FRAME {
                return Err(GeometryError::InvalidFrame(format!(
                    "{name} is not unit length (norm = {})",
                    v.norm()
                )));
            }
        }
        for (pair, d) in [
            ("normal/col_dir", normal.dot(&col_dir)),
            ("normal/row_dir", normal.dot(&row_dir)),
            ("col_dir/row_dir", col_dir.dot(&row_dir)),
        ] {
            if d.abs() > EPS_FRAME {
                return Err(GeometryError::InvalidFrame(format!(
                    "{pair} not orthogonal (dot = {d:.3e})"
                )));
            }
        }
        let cross = col_dir.cross(&row_dir);
        if (cross - normal).norm() > EPS_FRAME && (cross + normal).norm() > EPS_FRAME {
            return Err(GeometryError::InvalidFrame(
                "normal is not col_dir x row_dir up to sign".into(),
            ));
        }
        let deviation = (row_dir - Vec3::z()).norm();
        if deviation > EPS_FRAME {
            return Err(GeometryError::TiltedPlane { deviation });
        }
        if px_um[0] <= 0.0 || px_um[1] <= 0.0 {
            return Err(GeometryError::InvalidFrame("pixel spacing must be positive".into()));
        }
        Ok(Self { origin, normal, col_dir, row_dir, px_um, timestamp, n_cols, n_rows })
    }

    /// Column pixel spacing in mm.
    #[inline]
    pub fn px_col_mm(&self) -> f64 {
        self.px_um[0] * 1e-3
    }

    /// Row (axial) pixel spacing in mm.
    #[inline]
    pub fn px_row_mm(&self) -> f64 {
        self.px_um[1] * 1e-3
    }

    /// Signed distance of a point from the plane, mm.
    #[inline]
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.origin).dot(&self.normal)
    }

    /// Maps fractional pixel coordinates to 3D, mm. Points may lie outside
    /// the image bounds.
    pub fn pixel_to_3d(&self, col: f64, row: f64) -> Vec3 {
        self.origin + self.col_dir * (col * self.px_col_mm()) + self.row_dir * (row * self.px_row_mm())
    }

    /// Inverse of [`pixel_to_3d`](Self::pixel_to_3d): in-plane coordinates of
    /// a 3D point as fractional `(col, row)`. Off-plane points are projected
    /// onto the plane first.
    pub fn point_to_pixel(&self, p: &Vec3) -> (f64, f64) {
        let d = p - self.origin;
        (d.dot(&self.col_dir) / self.px_col_mm(), d.dot(&self.row_dir) / self.px_row_mm())
    }
}

/// Needle axis as a base point plus spherical direction angles.
///
/// `theta` is the azimuthal angle from the A-scan axis `z`, `phi` the polar
/// angle in the `xy` plane, so the direction is
/// `l = (sin θ cos φ, sin θ sin φ, cos θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolAxis {
    /// Base point, mm.
    pub base: Vec3,
    /// Angle from the `z` axis, radians, kept in `(0, π)`.
    pub theta: f64,
    /// Polar angle, radians, kept in `[-π, π)`.
    pub phi: f64,
}

impl ToolAxis {
    pub fn new(base: Vec3, theta: f64, phi: f64) -> Self {
        Self { base, theta, phi }
    }

    /// Unit direction vector of the axis.
    #[inline]
    pub fn direction(&self) -> Vec3 {
        direction_from_angles(self.theta, self.phi)
    }

    /// Point on the axis at parameter `tau`.
    #[inline]
    pub fn point_at(&self, tau: f64) -> Vec3 {
        self.base + self.direction() * tau
    }
}

/// `l(θ, φ) = (sin θ cos φ, sin θ sin φ, cos θ)`.
#[inline]
pub fn direction_from_angles(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// `∂l/∂θ`.
#[inline]
pub fn direction_dtheta(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(ct * cp, ct * sp, -st)
}

/// `∂l/∂φ`.
#[inline]
pub fn direction_dphi(theta: f64, phi: f64) -> Vec3 {
    let (st, _) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(-st * sp, st * cp, 0.0)
}

/// Spherical angles of a direction vector: `theta ∈ [0, π]`, `phi ∈ [-π, π)`.
pub fn angles_from_direction(l: &Vec3) -> (f64, f64) {
    let theta = l.z.clamp(-1.0, 1.0).acos();
    let mut phi = l.y.atan2(l.x);
    if phi >= std::f64::consts::PI {
        phi -= 2.0 * std::f64::consts::PI;
    }
    (theta, phi)
}

/// Folds `(theta, phi)` back into the canonical chart `theta ∈ (0, π)`,
/// `phi ∈ [-π, π)`. Crossing `theta = 0` or `theta = π` maps
/// `(θ, φ) -> (-θ, φ+π)` resp. `(2π-θ, φ+π)`, which leaves the direction
/// vector unchanged.
pub fn canonicalize_angles(theta: f64, phi: f64) -> (f64, f64) {
    use std::f64::consts::PI;
    let mut t = theta.rem_euclid(2.0 * PI);
    let mut p = phi;
    if t > PI {
        t = 2.0 * PI - t;
        p += PI;
    }
    let p = wrap_angle(p);
    (t, p)
}

/// Wraps an angle into `[-π, π)`.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Detected or modelled cross-section ellipse.
///
/// Center is in image pixel coordinates. Semi-axes are in axial pixel units
/// (metric length / row spacing) with `lambda1 >= lambda2 > 0`. `alpha` is
/// the metric-space angle between the major axis and the row (A-scan)
/// direction, folded into `[0, π/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center_col: f64,
    pub center_row: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

impl EllipseParams {
    /// Minor-to-major axis ratio, equals `|n·l|`.
    #[inline]
    pub fn ratio(&self) -> f64 {
        self.lambda2 / self.lambda1
    }
}

/// Folds an undirected line angle into `[0, π/2]`.
pub fn fold_line_angle(alpha: f64) -> f64 {
    use std::f64::consts::PI;
    let a = alpha.rem_euclid(PI);
    if a > PI / 2.0 {
        PI - a
    } else {
        a
    }
}

/// Intersection of the tool axis with a scan plane.
///
/// Errors with [`GeometryError::ParallelLinePlane`] when `|l·n| <= EPS_PARALLEL`,
/// the grazing-incidence singularity.
pub fn line_plane_intersect(axis: &ToolAxis, plane: &ScanPlane) -> Result<Vec3, GeometryError> {
    let l = axis.direction();
    let l_dot_n = l.dot(&plane.normal);
    if l_dot_n.abs() <= EPS_PARALLEL {
        return Err(GeometryError::ParallelLinePlane { l_dot_n });
    }
    let tau = (plane.origin - axis.base).dot(&plane.normal) / l_dot_n;
    Ok(axis.base + l * tau)
}

/// Total least-squares line through 3D points: `(centroid, unit direction)`.
///
/// The direction is oriented into the `+z` hemisphere (ties broken toward
/// `+x`, then `+y`). Returns `None` for fewer than two points or when the
/// points have no measurable spread.
pub fn fit_line_3d(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut scatter = nalgebra::Matrix3::<f64>::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let mut max_i = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] > eig.eigenvalues[max_i] {
            max_i = i;
        }
    }
    if eig.eigenvalues[max_i] <= 1e-18 {
        return None;
    }
    let mut dir: Vec3 = eig.eigenvectors.column(max_i).into();
    dir.normalize_mut();
    let flip = if dir.z.abs() > 1e-12 {
        dir.z < 0.0
    } else if dir.x.abs() > 1e-12 {
        dir.x < 0.0
    } else {
        dir.y < 0.0
    };
    if flip {
        dir = -dir;
    }
    Some((centroid, dir))
}

/// Full description of the cylinder–plane cross-section, used by the
/// renderer and the forward ellipse model.
#[derive(Debug, Clone)]
pub struct CylinderSection {
    /// Ellipse center in 3D, mm (on the plane and on the axis).
    pub center: Vec3,
    /// Ellipse center in pixel coordinates.
    pub center_px: (f64, f64),
    /// Semi-major axis, mm.
    pub lambda1_mm: f64,
    /// Semi-minor axis, mm (always the cylinder radius).
    pub lambda2_mm: f64,
    /// Unit major-axis direction in 3D; `None` when the section is a circle.
    pub major_dir: Option<Vec3>,
    /// `n·l` for this axis/plane pair (signed).
    pub n_dot_l: f64,
}

impl CylinderSection {
    /// In-plane components `(along col_dir, along row_dir)` of the major-axis
    /// direction; `(1, 0)` by convention for circular sections.
    pub fn major_dir_inplane(&self, plane: &ScanPlane) -> (f64, f64) {
        match &self.major_dir {
            Some(m) => (m.dot(&plane.col_dir), m.dot(&plane.row_dir)),
            None => (1.0, 0.0),
        }
    }
}

/// Intersects an ideal cylinder (axis + radius) with a scan plane.
///
/// The section of a cylinder of radius `r` whose axis meets the plane at
/// incidence `cos β = n·l` is an ellipse with semi-minor axis `r`
/// (perpendicular to the projected axis) and semi-major axis `r / |n·l|`
/// along the in-plane projection of the axis.
pub fn cylinder_section(
    axis: &ToolAxis,
    radius_mm: f64,
    plane: &ScanPlane,
) -> Result<CylinderSection, GeometryError> {
    let center = line_plane_intersect(axis, plane)?;
    let l = axis.direction();
    let n_dot_l = plane.normal.dot(&l);
    let proj = l - plane.normal * n_dot_l;
    let proj_norm = proj.norm();
    let major_dir = if proj_norm < EPS_PROJECTION { None } else { Some(proj / proj_norm) };
    Ok(CylinderSection {
        center,
        center_px: plane.point_to_pixel(&center),
        lambda1_mm: radius_mm / n_dot_l.abs(),
        lambda2_mm: radius_mm,
        major_dir,
        n_dot_l,
    })
}

/// Forward model: ellipse parameters of the cylinder cross-section.
///
/// `alpha` is the true metric-space angle between the major axis and the
/// row direction; for a circular section (axis along the normal) it is 0 by
/// convention.
pub fn ellipse_from_cylinder(
    axis: &ToolAxis,
    radius_mm: f64,
    plane: &ScanPlane,
) -> Result<EllipseParams, GeometryError> {
    let s = cylinder_section(axis, radius_mm, plane)?;
    let alpha = match &s.major_dir {
        Some(m) => fold_line_angle(m.dot(&plane.row_dir).clamp(-1.0, 1.0).acos()),
        None => 0.0,
    };
    let px_row = plane.px_row_mm();
    Ok(EllipseParams {
        center_col: s.center_px.0,
        center_row: s.center_px.1,
        lambda1: s.lambda1_mm / px_row,
        lambda2: s.lambda2_mm / px_row,
        alpha,
    })
}

/// Unsigned axis constraints recovered from one cross-section ellipse.
#[derive(Debug, Clone, Copy)]
pub struct AxisConstraints {
    /// `|cos θ|` of the axis direction.
    pub cos_theta_abs: f64,
    /// `|n·l|`, the incidence cosine.
    pub n_dot_l_abs: f64,
    /// Ellipse center mapped to 3D, mm.
    pub center3d: Vec3,
}

/// Inverse relations: recovers the unsigned direction constraints from the
/// ellipse shape.
///
/// The ratio gives the incidence directly, `λ2/λ1 = |n·l|`. The major-axis
/// angle relates to the axis elevation through the in-plane projection: the
/// projected axis has norm `√(1-(n·l)²)` and z-component `cos θ` (vertical
/// planes), so `|cos θ| = cos α · √(1-(λ2/λ1)²)`. Signs are left to the
/// tracking filter.
pub fn axis_constraints_from_ellipse(e: &EllipseParams, plane: &ScanPlane) -> AxisConstraints {
    let ratio = e.ratio().clamp(0.0, 1.0);
    let cos_theta_abs = e.alpha.cos() * (1.0 - ratio * ratio).sqrt();
    AxisConstraints {
        cos_theta_abs: cos_theta_abs.clamp(0.0, 1.0),
        n_dot_l_abs: ratio,
        center3d: plane.pixel_to_3d(e.center_col, e.center_row),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn plane_at(origin: Vec3, normal: Vec3, col_dir: Vec3) -> ScanPlane {
        ScanPlane::new(origin, normal, col_dir, Vec3::z(), [5.0, 2.5], 0.0, 1024, 1024).unwrap()
    }

    /// Default test plane: normal -y, cols along +x, rows along +z.
    fn default_plane() -> ScanPlane {
        plane_at(Vec3::zeros(), -Vec3::y(), Vec3::x())
    }

    #[test]
    fn intersect_one_step_along_axis() {
        let axis = ToolAxis::new(Vec3::new(0.0, 1.0, 0.0), FRAC_PI_2, FRAC_PI_2);
        let plane = plane_at(Vec3::zeros(), Vec3::y(), Vec3::x());
        let p = line_plane_intersect(&axis, &plane).unwrap();
        assert_relative_eq!(p, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn intersect_base_on_plane_is_identity() {
        let base = Vec3::new(0.7, 0.0, 1.3);
        let axis = ToolAxis::new(base, 1.1, 0.9);
        let plane = default_plane();
        let p = line_plane_intersect(&axis, &plane).unwrap();
        assert_relative_eq!(p, base, epsilon = 1e-12);
    }

    #[test]
    fn intersect_parallel_axis_errors() {
        // theta=pi/4, phi=0 gives l=(0.707,0,0.707) with zero y-component:
        // parallel to a plane with normal y.
        let axis = ToolAxis::new(Vec3::new(1.0, 2.0, 3.0), PI / 4.0, 0.0);
        let plane = plane_at(Vec3::zeros(), Vec3::y(), Vec3::x());
        assert!(matches!(
            line_plane_intersect(&axis, &plane),
            Err(GeometryError::ParallelLinePlane { .. })
        ));
    }

    /// Scalar root-solve oracle: find tau with (x(tau)-p).n = 0 by bisection
    /// and compare against the closed form.
    #[test]
    fn intersect_matches_root_solve_oracle() {
        let axis = ToolAxis::new(Vec3::new(1.0, 2.0, 3.0), PI / 4.0, FRAC_PI_2);
        let plane = plane_at(Vec3::zeros(), Vec3::y(), Vec3::x());
        let f = |tau: f64| (axis.point_at(tau) - plane.origin).dot(&plane.normal);
        let (mut lo, mut hi) = (-1e4, 1e4);
        assert!(f(lo) * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = axis.point_at(0.5 * (lo + hi));
        let p = line_plane_intersect(&axis, &plane).unwrap();
        assert_relative_eq!(p, oracle, epsilon = 1e-9);
        assert_relative_eq!(p, Vec3::new(1.0, 0.0, 1.0), epsilon = 1e-12);
        assert!(plane.signed_distance(&p).abs() < 1e-9);
    }

    #[test]
    fn pixel_roundtrip_and_units() {
        let plane = default_plane();
        assert_relative_eq!(plane.pixel_to_3d(0.0, 0.0), plane.origin, epsilon = 1e-15);
        // 100 columns at 5 um/px along +x is 0.5 mm.
        assert_relative_eq!(plane.pixel_to_3d(100.0, 0.0), Vec3::new(0.5, 0.0, 0.0), epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let col = rng.random_range(-100.0..2000.0);
            let row = rng.random_range(-100.0..2000.0);
            let p = plane.pixel_to_3d(col, row);
            let (c2, r2) = plane.point_to_pixel(&p);
            assert!((c2 - col).abs() < 1e-9 && (r2 - row).abs() < 1e-9);
        }
    }

    #[test]
    fn tilted_plane_rejected() {
        let tilt = (Vec3::z() + Vec3::x() * 0.01).normalize();
        let col = Vec3::y();
        let n = col.cross(&tilt);
        let r = ScanPlane::new(Vec3::zeros(), n, col, tilt, [5.0, 2.5], 0.0, 64, 64);
        assert!(matches!(r, Err(GeometryError::TiltedPlane { .. })));
    }

    #[test]
    fn circle_when_axis_along_normal() {
        // Axis along -y == plane normal direction.
        let axis = ToolAxis::new(Vec3::new(2.0, 0.5, 1.0), FRAC_PI_2, -FRAC_PI_2);
        let plane = default_plane();
        let e = ellipse_from_cylinder(&axis, 0.3, &plane).unwrap();
        assert_relative_eq!(e.lambda1, e.lambda2, epsilon = 1e-12);
        assert_relative_eq!(e.lambda2 * plane.px_row_mm(), 0.3, epsilon = 1e-12);
        assert_eq!(e.alpha, 0.0);

        let c = axis_constraints_from_ellipse(&e, &plane);
        assert_relative_eq!(c.n_dot_l_abs, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.cos_theta_abs, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sixty_degree_incidence_doubles_major_axis() {
        // angle(l, n) = 60 deg -> |n·l| = 0.5 -> lambda1 = 2 * radius.
        let plane = default_plane();
        // l with l·(-y) = 0.5: theta = pi/2, sin(phi) = -0.5.
        let axis = ToolAxis::new(Vec3::new(2.0, 0.0, 1.0), FRAC_PI_2, (-0.5f64).asin());
        let e = ellipse_from_cylinder(&axis, 0.2, &plane).unwrap();
        assert_relative_eq!(e.lambda1 * plane.px_row_mm(), 0.4, epsilon = 1e-12);
        assert_relative_eq!(e.lambda2 * plane.px_row_mm(), 0.2, epsilon = 1e-12);
        assert_relative_eq!(e.ratio(), 0.5, epsilon = 1e-12);
    }

    /// Rejection-sampling oracle: sample points on the cylinder surface, keep
    /// the ones on the plane, and measure center and extents directly.
    fn sampled_section_oracle(
        axis: &ToolAxis,
        radius: f64,
        plane: &ScanPlane,
    ) -> (Vec3, f64, f64, Vec3) {
        let l = axis.direction();
        let e1 = if l.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = l.cross(&e1).normalize();
        let v = l.cross(&u);
        let n = &plane.normal;
        let ln = l.dot(n);
        // Exact per-angle solve for the axial coordinate puts every sample on
        // the plane; no tolerance window needed.
        let n_samples = 200_000;
        let mut pts = Vec::with_capacity(n_samples);
        for k in 0..n_samples {
            let psi = 2.0 * PI * (k as f64) / (n_samples as f64);
            let radial = (u * psi.cos() + v * psi.sin()) * radius;
            let s = (plane.origin - axis.base - radial).dot(n) / ln;
            pts.push(axis.base + l * s + radial);
        }
        let center = (pts[0] + pts[n_samples / 2]) * 0.5;
        let mut dmax = 0.0f64;
        let mut dmin = f64::INFINITY;
        let mut far = Vec3::zeros();
        for p in &pts {
            let d = (p - center).norm();
            if d > dmax {
                dmax = d;
                far = p - center;
            }
            dmin = dmin.min(d);
        }
        (center, dmax, dmin, far.normalize())
    }

    #[test]
    fn forward_model_matches_sampling_oracle() {
        let plane = default_plane();
        let theta = PI / 3.0;
        // n·l = sin60 * sin30 in magnitude with normal -y: phi = -30 deg.
        let axis = ToolAxis::new(Vec3::new(2.5, 0.3, 1.2), theta, -PI / 6.0);
        let radius = 0.205;

        let s = cylinder_section(&axis, radius, &plane).unwrap();
        let (c_o, l1_o, l2_o, far_o) = sampled_section_oracle(&axis, radius, &plane);

        assert_relative_eq!(s.center, c_o, epsilon = 1e-9);
        assert!((s.lambda1_mm - l1_o).abs() < 1e-6);
        assert!((s.lambda2_mm - l2_o).abs() < 1e-6);
        let m = s.major_dir.unwrap();
        assert!(m.dot(&far_o).abs() > 1.0 - 1e-6);

        // Inverse constraints recover the unsigned direction data exactly.
        let e = ellipse_from_cylinder(&axis, radius, &plane).unwrap();
        let c = axis_constraints_from_ellipse(&e, &plane);
        let expected_ratio = (theta.sin() * (PI / 6.0).sin()).abs();
        assert_relative_eq!(c.n_dot_l_abs, expected_ratio, epsilon = 1e-12);
        assert_relative_eq!(c.cos_theta_abs, theta.cos().abs(), epsilon = 1e-12);
        assert_relative_eq!(c.center3d, s.center, epsilon = 1e-9);
    }

    #[test]
    fn horizontal_needle_has_alpha_ninety() {
        let plane = default_plane();
        let axis = ToolAxis::new(Vec3::new(2.0, 0.0, 1.0), FRAC_PI_2, -PI / 3.0);
        let e = ellipse_from_cylinder(&axis, 0.2, &plane).unwrap();
        assert_relative_eq!(e.alpha, FRAC_PI_2, epsilon = 1e-12);
        let c = axis_constraints_from_ellipse(&e, &plane);
        assert!(c.cos_theta_abs.abs() < 1e-12);
    }

    #[test]
    fn angle_fold_and_canonicalize() {
        assert_relative_eq!(fold_line_angle(2.0), PI - 2.0, epsilon = 1e-12);
        assert_relative_eq!(fold_line_angle(-0.3), 0.3, epsilon = 1e-12);
        let (t, p) = canonicalize_angles(PI + 0.1, 0.2);
        let l0 = direction_from_angles(PI + 0.1, 0.2);
        let l1 = direction_from_angles(t, p);
        assert!(t > 0.0 && t < PI);
        assert_relative_eq!(l0, l1, epsilon = 1e-12);
        let (t2, p2) = canonicalize_angles(-0.4, -3.0);
        let l2 = direction_from_angles(-0.4, -3.0);
        assert_relative_eq!(l2, direction_from_angles(t2, p2), epsilon = 1e-12);
        assert!((-PI..PI).contains(&p2));
    }

    #[test]
    fn direction_partials_match_finite_differences() {
        let h = 1e-7;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let theta = rng.random_range(0.1..PI - 0.1);
            let phi = rng.random_range(-PI..PI);
            let dt = (direction_from_angles(theta + h, phi) - direction_from_angles(theta - h, phi))
                / (2.0 * h);
            let dp = (direction_from_angles(theta, phi + h) - direction_from_angles(theta, phi - h))
                / (2.0 * h);
            assert_relative_eq!(dt, direction_dtheta(theta, phi), epsilon = 1e-6);
            assert_relative_eq!(dp, direction_dphi(theta, phi), epsilon = 1e-6);
        }
    }

    #[test]
    fn line_fit_recovers_direction() {
        let base = Vec3::new(0.4, -1.2, 0.3);
        let dir = direction_from_angles(1.2, 0.7);
        let pts: Vec<Vec3> = (0..20).map(|i| base + dir * (0.1 * i as f64)).collect();
        let (c, d) = fit_line_3d(&pts).unwrap();
        assert!(d.cross(&dir).norm() < 1e-9);
        assert!(d.dot(&dir) > 0.0, "oriented into +z hemisphere");
        assert!((c - base).cross(&dir).norm() < 1e-9, "centroid on the line");

        assert!(fit_line_3d(&[base]).is_none());
        assert!(fit_line_3d(&[base, base]).is_none());

        // Two points fit exactly; -z direction gets flipped.
        let down = Vec3::new(0.3, 0.1, -0.95).normalize();
        let (_, d) = fit_line_3d(&[base, base + down * 2.0]).unwrap();
        assert!((d + down).norm() < 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_axis_plane() -> impl Strategy<Value = (ToolAxis, ScanPlane)> {
            (
                -2.0f64..2.0,
                -2.0f64..2.0,
                -2.0f64..2.0,
                0.05f64..(PI - 0.05),
                -PI..PI,
                -PI..PI,
            )
                .prop_map(|(x, y, z, theta, phi, plane_rot)| {
                    let axis = ToolAxis::new(Vec3::new(x, y, z), theta, phi);
                    let col = Vec3::new(plane_rot.cos(), plane_rot.sin(), 0.0);
                    let n = col.cross(&Vec3::z());
                    let plane = ScanPlane::new(
                        Vec3::new(0.1, -0.2, 0.05),
                        n,
                        col,
                        Vec3::z(),
                        [5.0, 2.5],
                        0.0,
                        1024,
                        1024,
                    )
                    .unwrap();
                    (axis, plane)
                })
        }

        proptest! {
            /// Forward then inverse recovers |n·l| and |cos θ| exactly.
            #[test]
            fn roundtrip_recovers_constraints((axis, plane) in arb_axis_plane()) {
                let l = axis.direction();
                let ln = l.dot(&plane.normal).abs();
                prop_assume!((0.05..0.999).contains(&ln));
                let e = ellipse_from_cylinder(&axis, 0.205, &plane).unwrap();
                let c = axis_constraints_from_ellipse(&e, &plane);
                prop_assert!((c.n_dot_l_abs - ln).abs() < 1e-9);
                prop_assert!((c.cos_theta_abs - axis.theta.cos().abs()).abs() < 1e-9);
                // lambda1 * |n·l| == lambda2 == radius, in mm.
                prop_assert!((e.lambda1 * ln - e.lambda2).abs() < 1e-9);
                prop_assert!((e.lambda2 * plane.px_row_mm() - 0.205).abs() < 1e-12);
            }

            /// The intersection point does not depend on where the base sits
            /// along the line.
            #[test]
            fn intersect_invariant_to_base_reparam(
                (axis, plane) in arb_axis_plane(),
                shift in -5.0f64..5.0,
            ) {
                let l = axis.direction();
                prop_assume!(l.dot(&plane.normal).abs() > 0.05);
                let moved = ToolAxis::new(axis.base + l * shift, axis.theta, axis.phi);
                let p0 = line_plane_intersect(&axis, &plane).unwrap();
                let p1 = line_plane_intersect(&moved, &plane).unwrap();
                prop_assert!((p0 - p1).norm() < 1e-9);
            }

            /// Flipping the axis direction leaves the ellipse unchanged.
            #[test]
            fn ellipse_invariant_to_direction_flip((axis, plane) in arb_axis_plane()) {
                let l = axis.direction();
                prop_assume!(l.dot(&plane.normal).abs() > 0.05);
                let (t2, p2) = angles_from_direction(&(-l));
                let flipped = ToolAxis::new(axis.base, t2, p2);
                let e0 = ellipse_from_cylinder(&axis, 0.205, &plane).unwrap();
                let e1 = ellipse_from_cylinder(&flipped, 0.205, &plane).unwrap();
                prop_assert!((e0.center_col - e1.center_col).abs() < 1e-9);
                prop_assert!((e0.center_row - e1.center_row).abs() < 1e-9);
                prop_assert!((e0.lambda1 - e1.lambda1).abs() < 1e-9);
                prop_assert!((e0.alpha - e1.alpha).abs() < 1e-9);
            }
        }
    }
}
