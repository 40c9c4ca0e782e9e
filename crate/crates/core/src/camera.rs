//! Pinhole camera geometry for the reprojection factor.
//!
//! Keyframe states are global 6-vectors `[ω, t]` (angle-axis rotation, then
//! translation) mapping world points into the camera frame: `p = R(ω)·l + t`.
//! The pixel is `(fx·p_x/p_z + cx, fy·p_y/p_z + cy)`.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, Rotation3, SMatrix, SVector, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Minimum camera-frame depth for a valid projection.
pub const DEPTH_EPSILON: f64 = 1e-6;

pub type Vector9 = SVector<f64, 9>;
pub type Matrix2x9 = SMatrix<f64, 2, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum CameraError {
    #[error("point is behind the camera (depth {depth:e})")]
    BehindCamera { depth: f64 },
    #[error("focal lengths must be positive (fx = {fx}, fy = {fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

impl Default for Intrinsics {
    /// VGA intrinsics of the common RGB-D benchmark cameras.
    fn default() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Angle-axis, radians.
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(
            v.fixed_rows::<3>(0).into_owned(),
            v.fixed_rows::<3>(3).into_owned(),
        )
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Rotation3::new(self.rotation).into_inner()
    }

    /// Builds a pose from a rotation matrix and translation.
    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self::new(canonicalize_angle_axis(rot.scaled_axis()), translation)
    }

    /// Camera-frame coordinates of a world point.
    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * point + self.translation
    }

    /// Camera centre in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn canonicalized(&self) -> Self {
        Self::new(canonicalize_angle_axis(self.rotation), self.translation)
    }
}

/// Wraps an angle-axis vector so its magnitude lies in `[0, π]`.
pub fn canonicalize_angle_axis(w: Vector3<f64>) -> Vector3<f64> {
    let theta = w.norm();
    if theta <= PI || !theta.is_finite() {
        return w;
    }
    let axis = w / theta;
    let mut wrapped = theta.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped -= 2.0 * PI;
    }
    axis * wrapped
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `∂(R(ω)·v)/∂ω` for the global angle-axis parameterisation.
pub fn rotate_point_jacobian(omega: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let r = Rotation3::new(*omega).into_inner();
    if theta2 < 1e-16 {
        return -skew(&(r * v));
    }
    let inner = omega * omega.transpose() + (r.transpose() - Matrix3::identity()) * skew(omega);
    -(r * skew(v) * inner) / theta2
}

fn check_depth(p: &Vector3<f64>) -> Result<(), CameraError> {
    if p.z > DEPTH_EPSILON {
        Ok(())
    } else {
        Err(CameraError::BehindCamera { depth: p.z })
    }
}

pub fn project(
    pose: &Pose,
    landmark: &Vector3<f64>,
    k: &Intrinsics,
) -> Result<Vector2<f64>, CameraError> {
    let p = pose.transform(landmark);
    check_depth(&p)?;
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Projection of a stacked `[ω, t, l]` state.
pub fn project_stacked(state: &Vector9, k: &Intrinsics) -> Result<Vector2<f64>, CameraError> {
    let (pose, landmark) = split_state(state);
    project(&pose, &landmark, k)
}

pub fn split_state(state: &Vector9) -> (Pose, Vector3<f64>) {
    let pose = Pose::new(
        state.fixed_rows::<3>(0).into_owned(),
        state.fixed_rows::<3>(3).into_owned(),
    );
    (pose, state.fixed_rows::<3>(6).into_owned())
}

pub fn stack_state(pose: &Vector6<f64>, landmark: &Vector3<f64>) -> Vector9 {
    let mut s = Vector9::zeros();
    s.fixed_rows_mut::<6>(0).copy_from(pose);
    s.fixed_rows_mut::<3>(6).copy_from(landmark);
    s
}

/// Analytic 2×9 Jacobian of the projection: columns `[∂h/∂ω, ∂h/∂t, ∂h/∂l]`.
pub fn measurement_jacobian(
    pose: &Pose,
    landmark: &Vector3<f64>,
    k: &Intrinsics,
) -> Result<Matrix2x9, CameraError> {
    let r = pose.rotation_matrix();
    let p = r * landmark + pose.translation;
    check_depth(&p)?;
    let iz = 1.0 / p.z;
    let dh_dp = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    );
    let mut j = Matrix2x9::zeros();
    j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dh_dp * rotate_point_jacobian(&pose.rotation, landmark)));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dh_dp);
    j.fixed_view_mut::<2, 3>(0, 6).copy_from(&(dh_dp * r));
    Ok(j)
}

/// Additive update of a stacked `[ω, t, l]` state followed by rotation
/// canonicalisation.
pub fn retract(state: &Vector9, delta: &Vector9) -> Vector9 {
    let mut out = state + delta;
    let w = canonicalize_angle_axis(out.fixed_rows::<3>(0).into_owned());
    out.fixed_rows_mut::<3>(0).copy_from(&w);
    out
}

pub fn retract_pose(state: &Vector6<f64>, delta: &Vector6<f64>) -> Vector6<f64> {
    let mut out = state + delta;
    let w = canonicalize_angle_axis(out.fixed_rows::<3>(0).into_owned());
    out.fixed_rows_mut::<3>(0).copy_from(&w);
    out
}
