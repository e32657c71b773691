//! Rigid poses, pinhole intrinsics, projection and pose sampling.
//!
//! A [`Pose`] maps object-frame points into the camera frame:
//! `X_cam = R · X_obj + t`. Translations are in meters, image coordinates in
//! pixels with pixel `(x, y)` centered at the integer location `(x, y)`.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point ({x:.6}, {y:.6}, {z:.6}) is behind the camera (depth {depth:.6} m)")]
    BehindCamera { x: f64, y: f64, z: f64, depth: f64 },
    #[error("invalid intrinsics: fx={fx}, fy={fy} (focal lengths must be positive)")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("pose text: {0}")]
    PoseText(String),
}

/// Rigid transform of the object frame into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation by the axis-angle vector `omega` (radians), then translation.
    pub fn from_axis_angle(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(rotation_from_axis_angle(omega), translation)
    }

    pub fn rot_x_deg(deg: f64) -> Self {
        Self::from_axis_angle(Vector3::x() * deg.to_radians(), Vector3::zeros())
    }

    pub fn rot_y_deg(deg: f64) -> Self {
        Self::from_axis_angle(Vector3::y() * deg.to_radians(), Vector3::zeros())
    }

    pub fn rot_z_deg(deg: f64) -> Self {
        Self::from_axis_angle(Vector3::z() * deg.to_radians(), Vector3::zeros())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        invert(self)
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol && self.rotation.determinant() > 0.0
    }

    /// Rotation as 9 row-major entries followed by the translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_array(v: &[f64; 12]) -> Pose {
        Pose::new(
            Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            Vector3::new(v[9], v[10], v[11]),
        )
    }
}

impl Pose {
    /// Plain-text form: the 9 row-major rotation entries on three lines, then
    /// the translation, each value with 17 significant digits.
    pub fn to_text(&self) -> String {
        let v = self.to_array();
        let mut out = String::new();
        for row in v.chunks(3) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Pose::to_text`]; any whitespace layout of 12 numbers is
    /// accepted.
    pub fn from_text(text: &str) -> Result<Pose, GeometryError> {
        let values = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| GeometryError::PoseText(format!("bad number `{t}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let v: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| {
            GeometryError::PoseText(format!("expected 12 numbers, got {}", v.len()))
        })?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::PoseText("non-finite value".into()));
        }
        Ok(Pose::from_array(&v))
    }
}

/// Result applies `b` then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn invert(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose::new(rt, -(rt * p.translation))
}

pub fn rotation_from_axis_angle(omega: Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(omega).into_inner()
}

/// Closest rotation (Frobenius norm) to an arbitrary 3×3 matrix.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point with `z > 0`.
    #[inline]
    pub fn project_camera(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    /// Unit-depth ray through pixel `u`.
    #[inline]
    pub fn unproject(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }
}

/// Projects an object-frame point; returns the pixel location and its depth
/// (the perspective scale factor).
pub fn project(
    point: &Vector3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let x = pose.transform_point(point);
    if x.z <= 0.0 {
        return Err(GeometryError::BehindCamera {
            x: point.x,
            y: point.y,
            z: point.z,
            depth: x.z,
        });
    }
    Ok((k.project_camera(&x), x.z))
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation * b.rotation.transpose();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Perturbation magnitudes for [`sample_poses_around`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSamplingConfig {
    /// Per-axis standard deviation of the axis-angle perturbation, degrees.
    pub rotation_sigma_deg: f64,
    /// Per-axis translation standard deviation as a fraction of mesh diameter.
    pub translation_sigma: f64,
    pub seed: u64,
}

impl Default for PoseSamplingConfig {
    fn default() -> Self {
        Self {
            rotation_sigma_deg: 5.0,
            translation_sigma: 0.02,
            seed: 0,
        }
    }
}

/// Draws `count` poses around `anchor`. Each has rotation `exp(ω)·R` with
/// `ω ~ N(0, σ_r² I)` and translation `t + δ`, `δ ~ N(0, (σ_t·diameter)² I)`.
pub fn sample_poses_around(
    anchor: &Pose,
    count: usize,
    cfg: &PoseSamplingConfig,
    diameter: f64,
) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..count)
        .map(|_| perturb_pose(anchor, cfg, diameter, &mut rng))
        .collect()
}

pub(crate) fn perturb_pose<R: rand::Rng>(
    anchor: &Pose,
    cfg: &PoseSamplingConfig,
    diameter: f64,
    rng: &mut R,
) -> Pose {
    let omega = gaussian_vec3(rng, cfg.rotation_sigma_deg.to_radians());
    let delta = gaussian_vec3(rng, cfg.translation_sigma * diameter);
    Pose::new(
        rotation_from_axis_angle(omega) * anchor.rotation,
        anchor.translation + delta,
    )
}

pub(crate) fn gaussian_vec3<R: rand::Rng>(rng: &mut R, std: f64) -> Vector3<f64> {
    if std <= 0.0 {
        // Still consume draws so sequences stay aligned across configs.
        let _: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, std).expect("finite std");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}
