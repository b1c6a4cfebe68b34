//! Pinhole cameras, the continuous 6D rotation parameterization, and the
//! projective residual between two depth-corrected frames.
//!
//! Poses are world-to-camera: `X_cam = R * X_world + t`. Pixel coordinates
//! use the grid index directly, so pixel `(u, v)` of a depth map is the
//! sample at column `u`, row `v`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::graph::DataRecord;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate rotation seed: {0}")]
    DegenerateRotationSeed(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth scale alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),
}

/// Square-pixel, zero-skew pinhole camera with a single focal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        focal: f64,
        principal_point: Vector2<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal must be positive, got {focal}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image size must be positive".into(),
            ));
        }
        let (cx, cy) = (principal_point.x, principal_point.y);
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            focal,
            principal_point,
            width,
            height,
        })
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(focal, image_center(width, height), width, height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, p: &Vector2<f64>) -> Vector2<f64> {
        (p - self.principal_point) / self.focal
    }

    pub fn denormalize(&self, x: &Vector2<f64>) -> Vector2<f64> {
        x * self.focal + self.principal_point
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= -0.5
            && p.y >= -0.5
            && p.x < self.width as f64 - 0.5
            && p.y < self.height as f64 - 0.5
    }
}

pub fn image_center(width: u32, height: u32) -> Vector2<f64> {
    Vector2::new(width as f64 / 2.0, height as f64 / 2.0)
}

/// Gram-Schmidt orthonormalization of two column seeds into a proper rotation.
pub fn rotation_from_6d(seed: &[f64; 6]) -> Result<Matrix3<f64>, GeometryError> {
    let a = Vector3::new(seed[0], seed[1], seed[2]);
    let b = Vector3::new(seed[3], seed[4], seed[5]);
    let an = a.norm();
    if !(an > 1e-12) {
        return Err(GeometryError::DegenerateRotationSeed(
            "first seed has zero norm",
        ));
    }
    let c1 = a / an;
    let bp = b - c1 * b.dot(&c1);
    let bpn = bp.norm();
    if !(bpn > 1e-12 * b.norm().max(1.0)) {
        return Err(GeometryError::DegenerateRotationSeed("seeds are parallel"));
    }
    let c2 = bp / bpn;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Pull a gradient with respect to the rotation matrix back onto the 6D seed.
///
/// `grad_r[(i, j)]` is dL/dR_ij. The seed must be non-degenerate.
pub fn rotation_6d_backward(seed: &[f64; 6], grad_r: &Matrix3<f64>) -> [f64; 6] {
    let a = Vector3::new(seed[0], seed[1], seed[2]);
    let b = Vector3::new(seed[3], seed[4], seed[5]);
    let an = a.norm();
    let c1 = a / an;
    let bc = b.dot(&c1);
    let bp = b - c1 * bc;
    let bpn = bp.norm();
    let c2 = bp / bpn;

    let g1: Vector3<f64> = grad_r.column(0).into();
    let g2: Vector3<f64> = grad_r.column(1).into();
    let g3: Vector3<f64> = grad_r.column(2).into();

    // c3 = c1 x c2
    let mut gc1 = g1 + c2.cross(&g3);
    let gc2 = g2 + g3.cross(&c1);

    let gbp = (gc2 - c2 * c2.dot(&gc2)) / bpn;
    // bp = b - (b . c1) c1
    let gb = gbp - c1 * c1.dot(&gbp);
    gc1 -= gbp * bc + b * c1.dot(&gbp);

    let ga = (gc1 - c1 * c1.dot(&gc1)) / an;
    [ga.x, ga.y, ga.z, gb.x, gb.y, gb.z]
}

/// World-to-camera pose with a 6D rotation seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation_6d: [f64; 6],
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self::from_rotation(&Matrix3::identity(), Vector3::zeros())
    }

    /// Seeds the 6D representation with the first two columns of `r`.
    pub fn from_rotation(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation_6d: [
                r[(0, 0)],
                r[(1, 0)],
                r[(2, 0)],
                r[(0, 1)],
                r[(1, 1)],
                r[(2, 1)],
            ],
            translation: t,
        }
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>, GeometryError> {
        rotation_from_6d(&self.rotation_6d)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Result<Vector3<f64>, GeometryError> {
        Ok(-(self.rotation()?.transpose() * self.translation))
    }
}

/// Per-frame affine correction `D' = alpha * D + beta`, stored as `ln(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineDepthCorrection {
    pub log_alpha: f64,
    pub beta: f64,
}

impl AffineDepthCorrection {
    pub fn identity() -> Self {
        Self {
            log_alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn new(alpha: f64, beta: f64) -> Result<Self, GeometryError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(GeometryError::NonPositiveAlpha(alpha));
        }
        Ok(Self {
            log_alpha: alpha.ln(),
            beta,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn apply(&self, depth: f64) -> f64 {
        self.alpha() * depth + self.beta
    }
}

/// Which parameter groups the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub pose: bool,
    pub focal: bool,
    pub correction: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        pose: true,
        focal: true,
        correction: true,
    };
    pub const NONE: Trainable = Trainable {
        pose: false,
        focal: false,
        correction: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub frame_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub correction: AffineDepthCorrection,
    pub trainable: Trainable,
}

impl FrameState {
    pub fn new(frame_id: u32, intrinsics: CameraIntrinsics) -> Self {
        Self {
            frame_id,
            intrinsics,
            pose: CameraPose::identity(),
            correction: AffineDepthCorrection::identity(),
            trainable: Trainable::ALL,
        }
    }
}

/// Guards for back-projection and projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFloors {
    pub depth_floor: f64,
    pub z_floor: f64,
}

impl Default for ProjectionFloors {
    fn default() -> Self {
        Self {
            depth_floor: 1e-6,
            z_floor: 1e-6,
        }
    }
}

/// A frame with its rotation materialized, ready for repeated projection.
#[derive(Debug, Clone, Copy)]
pub struct FrameView {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl FrameView {
    pub fn new(state: &FrameState) -> Result<Self, GeometryError> {
        Ok(Self {
            rotation: state.pose.rotation()?,
            translation: state.pose.translation,
            focal: state.intrinsics.focal,
            principal_point: state.intrinsics.principal_point,
            alpha: state.correction.alpha(),
            beta: state.correction.beta,
        })
    }

    /// Back-project pixel `p` at raw depth into this camera's frame.
    pub fn back_project(
        &self,
        p: &Vector2<f64>,
        raw_depth: f64,
        floors: &ProjectionFloors,
    ) -> Option<Vector3<f64>> {
        let d = self.alpha * raw_depth + self.beta;
        if !(d > floors.depth_floor) || !d.is_finite() {
            return None;
        }
        let m = (p - self.principal_point) / self.focal;
        Some(Vector3::new(m.x * d, m.y * d, d))
    }

    pub fn camera_to_world(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x_cam - self.translation)
    }

    pub fn world_to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    pub fn project(&self, x_cam: &Vector3<f64>, floors: &ProjectionFloors) -> Option<Vector2<f64>> {
        if !(x_cam.z > floors.z_floor) {
            return None;
        }
        Some(Vector2::new(
            self.focal * x_cam.x / x_cam.z + self.principal_point.x,
            self.focal * x_cam.y / x_cam.z + self.principal_point.y,
        ))
    }
}

/// Move pixel `p` of `src` with raw depth `depth` into the image of `dst`.
///
/// `None` marks an invalid projection: the corrected depth or the
/// destination depth fell below its floor.
pub fn project_between(
    p: &Vector2<f64>,
    depth: f64,
    src: &FrameState,
    dst: &FrameState,
    floors: &ProjectionFloors,
) -> Result<Option<Vector2<f64>>, GeometryError> {
    let (s, d) = (FrameView::new(src)?, FrameView::new(dst)?);
    Ok(project_view(p, depth, &s, &d, floors))
}

pub fn project_view(
    p: &Vector2<f64>,
    depth: f64,
    src: &FrameView,
    dst: &FrameView,
    floors: &ProjectionFloors,
) -> Option<Vector2<f64>> {
    if !depth.is_finite() {
        return None;
    }
    let x_src = src.back_project(p, depth, floors)?;
    let x_dst = dst.world_to_camera(&src.camera_to_world(&x_src));
    dst.project(&x_dst, floors)
}

/// Pixel distance between the projected source pixel and its match;
/// `+inf` for an invalid projection.
pub fn projective_residual(
    record: &DataRecord,
    src: &FrameState,
    dst: &FrameState,
    floors: &ProjectionFloors,
) -> Result<f64, GeometryError> {
    let (s, d) = (FrameView::new(src)?, FrameView::new(dst)?);
    Ok(residual_view(record, &s, &d, floors))
}

pub fn residual_view(
    record: &DataRecord,
    src: &FrameView,
    dst: &FrameView,
    floors: &ProjectionFloors,
) -> f64 {
    match project_view(&record.src_pixel, record.src_depth, src, dst, floors) {
        Some(q) => (q - record.dst_pixel).norm(),
        None => f64::INFINITY,
    }
}

/// Derivatives of one residual with respect to both frames' raw parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualJacobian {
    pub src_rotation: Matrix3<f64>,
    pub src_translation: Vector3<f64>,
    pub src_focal: f64,
    pub src_log_alpha: f64,
    pub src_beta: f64,
    pub dst_rotation: Matrix3<f64>,
    pub dst_translation: Vector3<f64>,
    pub dst_focal: f64,
}

/// Residual and its gradient. The rotation entries are dr/dR_ij and still
/// need [`rotation_6d_backward`] to reach the seeds. At `r == 0` the
/// gradient is taken as zero.
pub fn residual_with_jacobian(
    record: &DataRecord,
    src: &FrameView,
    dst: &FrameView,
    floors: &ProjectionFloors,
) -> Option<(f64, ResidualJacobian)> {
    if !record.src_depth.is_finite() {
        return None;
    }
    let d = src.alpha * record.src_depth + src.beta;
    if !(d > floors.depth_floor) || !d.is_finite() {
        return None;
    }
    let m = (record.src_pixel - src.principal_point) / src.focal;
    let x_src = Vector3::new(m.x * d, m.y * d, d);
    let diff = x_src - src.translation;
    let x_world = src.rotation.transpose() * diff;
    let x_dst = dst.rotation * x_world + dst.translation;
    if !(x_dst.z > floors.z_floor) {
        return None;
    }
    let (iz, xn, yn) = (1.0 / x_dst.z, x_dst.x / x_dst.z, x_dst.y / x_dst.z);
    let proj = Vector2::new(
        dst.focal * xn + dst.principal_point.x,
        dst.focal * yn + dst.principal_point.y,
    );
    let e = proj - record.dst_pixel;
    let r = e.norm();
    if r == 0.0 {
        return Some((
            0.0,
            ResidualJacobian {
                src_rotation: Matrix3::zeros(),
                src_translation: Vector3::zeros(),
                src_focal: 0.0,
                src_log_alpha: 0.0,
                src_beta: 0.0,
                dst_rotation: Matrix3::zeros(),
                dst_translation: Vector3::zeros(),
                dst_focal: 0.0,
            },
        ));
    }
    let g_proj = e / r;
    let dst_focal = g_proj.x * xn + g_proj.y * yn;
    let g_xdst = Vector3::new(
        dst.focal * g_proj.x * iz,
        dst.focal * g_proj.y * iz,
        -dst.focal * (g_proj.x * xn + g_proj.y * yn) * iz,
    );
    let dst_rotation = g_xdst * x_world.transpose();
    let g_xworld = dst.rotation.transpose() * g_xdst;
    let g_diff = src.rotation * g_xworld;
    let src_rotation = diff * g_xworld.transpose();
    let g_xsrc = g_diff;
    let g_depth = g_xsrc.x * m.x + g_xsrc.y * m.y + g_xsrc.z;
    let src_focal = -d * (g_xsrc.x * m.x + g_xsrc.y * m.y) / src.focal;
    Some((
        r,
        ResidualJacobian {
            src_rotation,
            src_translation: -g_diff,
            src_focal,
            src_log_alpha: g_depth * src.alpha * record.src_depth,
            src_beta: g_depth,
            dst_rotation,
            dst_translation: g_xdst,
            dst_focal,
        },
    ))
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part there.
    let s = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    )
    .norm()
        / 2.0;
    s.atan2(c).to_degrees()
}

/// Angle between two vectors in degrees; 0 when either is zero.
pub fn vector_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let c = a.dot(b) / (na * nb);
    let s = a.cross(b).norm() / (na * nb);
    s.atan2(c).to_degrees()
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
