//! Rigid-body algebra, pinhole projection and the reprojection Jacobians.
//!
//! Poses are world-to-camera throughout. Perturbations are applied on the left,
//! `T <- exp(xi) * T`, with the twist ordered as (translation, rotation).

pub mod check;

use std::ops::Mul;

use nalgebra::{
    Matrix2x3, Matrix2x6, Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3,
    Vector6,
};

use crate::error::{Error, Result};

/// Near-plane cutoff for projection and Jacobians, in meters.
pub const Z_MIN: f64 = 0.01;

const ORTHONORMAL_TOL: f64 = 1e-9;
const SERIES_ANGLE: f64 = 1e-3;
/// Below this angle the coefficients that suffer cancellation use Taylor series.
const CANCELLATION_ANGLE: f64 = 0.1;
const LOG_ANGLE_MARGIN: f64 = 1e-6;

/// Point expressed in the camera frame (x right, y down, z forward).
pub type CameraPoint = Vector3<f64>;

/// Rigid transform stored as a rotation matrix and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal with det +1 (error {err:e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Hamilton quaternion in `(qx, qy, qz, qw)` order.
    pub fn from_quaternion(translation: Vector3<f64>, q: [f64; 4]) -> Result<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::invalid("quaternion has zero or non-finite norm"));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Self::new(*unit.to_rotation_matrix().matrix(), translation)
    }

    /// Hamilton quaternion `(qx, qy, qz, qw)` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.i, sign * q.j, sign * q.k, sign * q.w]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Camera center in world coordinates for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Left-multiplies by `exp(xi)`.
    pub fn perturbed(&self, xi: &Twist) -> Result<Pose> {
        Ok(se3_exp(xi)?.compose(self))
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max()
    }

    /// Re-projects the rotation onto SO(3) through the closest unit quaternion.
    pub fn renormalized(&self) -> Pose {
        let rot = Rotation3::from_matrix(&self.rotation);
        Pose {
            rotation: *rot.matrix(),
            translation: self.translation,
        }
    }

    /// Translation distance and rotation angle of `self^-1 * other`.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.translation.norm(), rel.rotation_angle())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Tangent-space perturbation ordered (translation, rotation).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(tx: f64, ty: f64, tz: f64, rx: f64, ry: f64, rz: f64) -> Self {
        Twist(Vector6::new(tx, ty, tz, rx, ry, rz))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn from_parts(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Pinhole intrinsics. Image coordinates are pixels with the origin at the
/// top-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if !(cx > 0.0 && cx < f64::from(width) && cy > 0.0 && cy < f64::from(height)) {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// True when `pixel` lies in `[0, width) x [0, height)`.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < f64::from(self.width)
            && pixel.y < f64::from(self.height)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let sin_axis = vee(r);
    let cos = (r.trace() - 1.0) * 0.5;
    sin_axis.norm().atan2(cos)
}

/// Coefficients `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn exp_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < CANCELLATION_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        let t8 = t4 * t4;
        (
            1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0 + t8 / 362_880.0,
            0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40_320.0 + t8 / 3_628_800.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362_880.0 + t8 / 39_916_800.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b, _) = exp_coefficients(theta);
    let k = skew(phi);
    Matrix3::identity() + k * a + k * k * b
}

pub fn se3_exp(xi: &Twist) -> Result<Pose> {
    if !xi.is_finite() {
        return Err(Error::invalid("twist has non-finite entries"));
    }
    let rho = xi.translation();
    let phi = xi.rotation();
    let theta = phi.norm();
    let (a, b, c) = exp_coefficients(theta);
    let k = skew(&phi);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Ok(Pose {
        rotation,
        translation: v * rho,
    })
}

pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let r = &pose.rotation;
    let theta = rotation_angle(r);
    if theta > std::f64::consts::PI - LOG_ANGLE_MARGIN {
        return Err(Error::IllConditioned(format!(
            "rotation angle {theta} too close to pi for the logarithm"
        )));
    }
    let sin_axis = vee(r);
    // phi = theta / sin(theta) * vee(R)
    let scale = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
    } else {
        theta / theta.sin()
    };
    let phi = sin_axis * scale;
    let k = skew(&phi);
    // V^-1 = I - K/2 + (1/t^2) (1 - t sin t / (2 (1 - cos t))) K^2
    let d = if theta < CANCELLATION_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        1.0 / 12.0 + t2 / 720.0 + t4 / 30_240.0 + t4 * t2 / 1_209_600.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    Ok(Twist::from_parts(v_inv * pose.translation, phi))
}

/// Projects a camera-frame point.
pub fn project_camera_point(k: &CameraIntrinsics, pc: &CameraPoint) -> Result<Vector2<f64>> {
    if !(pc.z > Z_MIN) {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    Ok(Vector2::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// Projects a world point through a world-to-camera pose. No bounds clipping.
pub fn project(pose: &Pose, k: &CameraIntrinsics, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    project_camera_point(k, &pose.transform_point(point))
}

/// Camera-frame point at `depth` along the ray through `pixel`.
pub fn backproject(k: &CameraIntrinsics, pixel: &Vector2<f64>, depth: f64) -> CameraPoint {
    Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    )
}

/// Derivative of the pinhole projection with respect to the camera-frame point.
pub fn projection_derivative(pc: &CameraPoint, k: &CameraIntrinsics) -> Result<Matrix2x3<f64>> {
    if !(pc.z > Z_MIN) {
        return Err(Error::DegeneratePoint { depth: pc.z });
    }
    let inv_z = 1.0 / pc.z;
    let inv_z2 = inv_z * inv_z;
    Ok(Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * pc.x * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * pc.y * inv_z2,
    ))
}

/// `[I | -p^]`: derivative of `exp(xi) * p` at `xi = 0`.
fn left_perturbation_block(p: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut block = nalgebra::Matrix3x6::zeros();
    block.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    block.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p)));
    block
}

/// Jacobian of `z - pi(T X)` with respect to a left perturbation of `T`,
/// evaluated at the camera-frame point `X' = T X`.
pub fn jacobian_wrt_pose(pc: &CameraPoint, k: &CameraIntrinsics) -> Result<Matrix2x6<f64>> {
    let p = projection_derivative(pc, k)?;
    Ok(-(p * left_perturbation_block(pc)))
}

/// Jacobian of `z - pi(T X)` with respect to the world point `X`.
pub fn jacobian_wrt_point(
    pc: &CameraPoint,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Matrix2x3<f64>> {
    let p = projection_derivative(pc, k)?;
    Ok(-(p * pose.rotation))
}

/// Jacobian of the prior-map residual `z - pi(T_cw * T_map * X)` with respect
/// to a left perturbation of `T_map`.
///
/// `pc` is the camera-frame point and `aligned_point` is `T_map * X`, the prior
/// point expressed in the local map frame.
pub fn jacobian_wrt_tmap(
    pc: &CameraPoint,
    aligned_point: &Vector3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Matrix2x6<f64>> {
    let p = projection_derivative(pc, k)?;
    Ok(-(p * pose.rotation * left_perturbation_block(aligned_point)))
}

/// Jacobian of the prior-map residual with respect to a left perturbation of
/// the keyframe pose. Same structure as [`jacobian_wrt_pose`], evaluated at
/// the prior point seen through the drift-corrected pose.
pub fn jacobian_wrt_pose_prior(pc: &CameraPoint, k: &CameraIntrinsics) -> Result<Matrix2x6<f64>> {
    jacobian_wrt_pose(pc, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()).unwrap(), Pose::identity());
    }

    #[test]
    fn exp_of_pure_translation() {
        let p = se3_exp(&Twist::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = se3_exp(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2)).unwrap();
        let q = p.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn exp_rejects_non_finite() {
        assert!(matches!(
            se3_exp(&Twist::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn log_of_identity_and_translation() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
        let xi = se3_log(&Pose::from_translation(Vector3::new(0.5, -1.0, 2.0))).unwrap();
        assert_eq!(xi.rotation(), Vector3::zeros());
        assert_eq!(xi.translation(), Vector3::new(0.5, -1.0, 2.0));
    }

    #[test]
    fn log_near_pi_is_ill_conditioned() {
        let p = se3_exp(&Twist::new(0.0, 0.0, 0.0, std::f64::consts::PI, 0.0, 0.0)).unwrap();
        assert!(matches!(se3_log(&p), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn small_angle_round_trip() {
        for scale in [1e-12, 1e-9, 1e-6, 1e-4, 2e-3] {
            let xi = Twist::new(0.3, -0.2, 0.1, scale, -2.0 * scale, 0.5 * scale);
            let back = se3_log(&se3_exp(&xi).unwrap()).unwrap();
            assert!((back.0 - xi.0).norm() < 1e-14, "scale {scale}: {:e}", (back.0 - xi.0).norm());
        }
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let k = cam();
        for z in [0.5, 3.0, 100.0] {
            let uv = project(&Pose::identity(), &k, &Vector3::new(0.0, 0.0, z)).unwrap();
            assert_eq!(uv, Vector2::new(64.0, 64.0));
        }
    }

    #[test]
    fn project_direct_substitution() {
        let uv = project(&Pose::identity(), &cam(), &Vector3::new(0.5, -0.25, 2.0)).unwrap();
        assert_eq!(uv, Vector2::new(89.0, 51.5));
    }

    #[test]
    fn project_behind_camera_fails() {
        let r = project(&Pose::identity(), &cam(), &Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(r, Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn pose_jacobian_on_axis() {
        let k = cam();
        let j = jacobian_wrt_pose(&Vector3::new(0.0, 0.0, 4.0), &k).unwrap();
        let t = j.fixed_view::<2, 3>(0, 0);
        assert_eq!(t, Matrix2x3::new(-25.0, 0.0, 0.0, 0.0, -25.0, 0.0));
        let j2 = jacobian_wrt_pose(&Vector3::new(0.0, 0.0, 8.0), &k).unwrap();
        assert_eq!(j2[(0, 0)], 0.5 * j[(0, 0)]);
    }

    #[test]
    fn point_jacobian_identity_rotation() {
        let k = cam();
        let pc = Vector3::new(0.3, 0.2, 2.0);
        let j = jacobian_wrt_point(&pc, &Pose::identity(), &k).unwrap();
        assert_eq!(j, -projection_derivative(&pc, &k).unwrap());
    }

    #[test]
    fn jacobians_reject_near_plane() {
        let k = cam();
        let pc = Vector3::new(0.0, 0.0, 0.005);
        assert!(matches!(
            jacobian_wrt_pose(&pc, &k),
            Err(Error::DegeneratePoint { .. })
        ));
        assert!(jacobian_wrt_point(&pc, &Pose::identity(), &k).is_err());
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let w = skew(&Vector3::new(1.0, 0.0, 0.0)) * Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(w, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn quaternion_round_trip() {
        let p = se3_exp(&Twist::new(1.0, 2.0, 3.0, 0.3, -0.4, 1.2)).unwrap();
        let q = p.quaternion();
        let back = Pose::from_quaternion(*p.translation(), q).unwrap();
        assert!((back.rotation() - p.rotation()).abs().max() < 1e-14);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn pose_new_rejects_reflection() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(r, Vector3::zeros()).is_err());
    }
}
