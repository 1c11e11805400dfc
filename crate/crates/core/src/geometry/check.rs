//! Finite-difference gate for the analytic reprojection Jacobians.

use nalgebra::{DMatrix, Matrix2x3, Matrix2x6, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    jacobian_wrt_point, jacobian_wrt_pose, jacobian_wrt_pose_prior, jacobian_wrt_tmap, project,
    se3_exp, CameraIntrinsics, CameraPoint, Pose, Twist,
};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-5;

type PoseJacobianFn = fn(&CameraPoint, &CameraIntrinsics) -> Result<Matrix2x6<f64>>;
type PointJacobianFn = fn(&CameraPoint, &Pose, &CameraIntrinsics) -> Result<Matrix2x3<f64>>;
type TmapJacobianFn =
    fn(&CameraPoint, &Vector3<f64>, &Pose, &CameraIntrinsics) -> Result<Matrix2x6<f64>>;

/// The four Jacobians under test. Swappable so that a corrupted set can be
/// fed through the same gate.
#[derive(Clone, Copy)]
pub struct AnalyticJacobians {
    pub wrt_pose: PoseJacobianFn,
    pub wrt_point: PointJacobianFn,
    pub wrt_tmap: TmapJacobianFn,
    pub wrt_pose_prior: PoseJacobianFn,
}

impl Default for AnalyticJacobians {
    fn default() -> Self {
        Self {
            wrt_pose: jacobian_wrt_pose,
            wrt_point: jacobian_wrt_point,
            wrt_tmap: jacobian_wrt_tmap,
            wrt_pose_prior: jacobian_wrt_pose_prior,
        }
    }
}

#[derive(Clone, Debug)]
pub struct JacobianStat {
    pub name: &'static str,
    pub trials: usize,
    pub max_relative_error: f64,
}

impl JacobianStat {
    pub fn passed(&self) -> bool {
        self.trials > 0 && self.max_relative_error < REL_TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct JacobianReport {
    pub stats: Vec<JacobianStat>,
}

impl JacobianReport {
    pub fn passed(&self) -> bool {
        self.stats.iter().all(JacobianStat::passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.stats
            .iter()
            .map(|s| s.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// Random non-degenerate configuration: intrinsics, a keyframe pose, a drift
/// transform and a world point that lands well in front of the camera.
pub struct Configuration {
    pub k: CameraIntrinsics,
    pub pose: Pose,
    pub t_map: Pose,
    pub camera_point: CameraPoint,
}

impl Configuration {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let width = 640;
        let height = 480;
        let fx = rng.random_range(200.0..800.0);
        let fy = fx * rng.random_range(0.9..1.1);
        let k = CameraIntrinsics::new(
            fx,
            fy,
            rng.random_range(300.0..340.0),
            rng.random_range(220.0..260.0),
            width,
            height,
        )
        .expect("valid intrinsics");
        let pose = random_pose(rng, 1.5, 5.0);
        let t_map = random_pose(rng, 0.3, 1.0);
        let z = rng.random_range(1.0..30.0);
        let camera_point = Vector3::new(
            rng.random_range(-0.6..0.6) * z,
            rng.random_range(-0.5..0.5) * z,
            z,
        );
        Self {
            k,
            pose,
            t_map,
            camera_point,
        }
    }

    /// World point in the local map frame.
    pub fn local_point(&self) -> Vector3<f64> {
        self.pose.inverse().transform_point(&self.camera_point)
    }

    /// Prior-map point such that `pose * t_map * point` is the camera point.
    pub fn prior_point(&self) -> Vector3<f64> {
        self.pose
            .compose(&self.t_map)
            .inverse()
            .transform_point(&self.camera_point)
    }
}

pub fn random_pose<R: Rng>(rng: &mut R, max_angle: f64, max_translation: f64) -> Pose {
    let axis = random_unit(rng);
    let angle = rng.random_range(-max_angle..max_angle);
    let t = random_unit(rng) * rng.random_range(0.0..max_translation);
    se3_exp(&Twist::from_parts(t, axis * angle)).expect("finite twist")
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn residual(z: &Vector2<f64>, pose: &Pose, k: &CameraIntrinsics, x: &Vector3<f64>) -> Vector2<f64> {
    z - project(pose, k, x).expect("perturbation keeps the point in front")
}

fn central_difference<F>(cols: usize, mut f: F) -> DMatrix<f64>
where
    F: FnMut(usize, f64) -> Vector2<f64>,
{
    let mut j = DMatrix::zeros(2, cols);
    for c in 0..cols {
        let d = (f(c, FD_STEP) - f(c, -FD_STEP)) / (2.0 * FD_STEP);
        j.set_column(c, &d);
    }
    j
}

fn unit_twist(axis: usize, h: f64) -> Twist {
    let mut xi = Twist::zero();
    xi.0[axis] = h;
    xi
}

fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1e-12)
}

/// Compares each analytic Jacobian against central differences on `trials`
/// random configurations.
pub fn check_jacobians(seed: u64, trials: usize, jac: &AnalyticJacobians) -> JacobianReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["pose", "point", "tmap", "pose_prior"];
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let cfg = Configuration::random(&mut rng);
        let k = cfg.k;
        let z = Vector2::new(k.cx, k.cy);
        let x_local = cfg.local_point();
        let x_prior = cfg.prior_point();
        let pc = cfg.camera_point;

        let numeric = central_difference(6, |c, h| {
            let p = cfg.pose.perturbed(&unit_twist(c, h)).unwrap();
            residual(&z, &p, &k, &x_local)
        });
        let analytic = (jac.wrt_pose)(&pc, &k).map(|m| DMatrix::from_column_slice(2, 6, m.as_slice()));
        worst[0] = worst[0].max(error_or_inf(analytic, &numeric));

        let numeric = central_difference(3, |c, h| {
            let mut x = x_local;
            x[c] += h;
            residual(&z, &cfg.pose, &k, &x)
        });
        let analytic = (jac.wrt_point)(&pc, &cfg.pose, &k)
            .map(|m| DMatrix::from_column_slice(2, 3, m.as_slice()));
        worst[1] = worst[1].max(error_or_inf(analytic, &numeric));

        let aligned = cfg.t_map.transform_point(&x_prior);
        let numeric = central_difference(6, |c, h| {
            let t_map = cfg.t_map.perturbed(&unit_twist(c, h)).unwrap();
            residual(&z, &cfg.pose.compose(&t_map), &k, &x_prior)
        });
        let analytic = (jac.wrt_tmap)(&pc, &aligned, &cfg.pose, &k)
            .map(|m| DMatrix::from_column_slice(2, 6, m.as_slice()));
        worst[2] = worst[2].max(error_or_inf(analytic, &numeric));

        let numeric = central_difference(6, |c, h| {
            let p = cfg.pose.perturbed(&unit_twist(c, h)).unwrap();
            residual(&z, &p.compose(&cfg.t_map), &k, &x_prior)
        });
        let analytic = (jac.wrt_pose_prior)(&pc, &k)
            .map(|m| DMatrix::from_column_slice(2, 6, m.as_slice()));
        worst[3] = worst[3].max(error_or_inf(analytic, &numeric));
    }
    JacobianReport {
        stats: names
            .iter()
            .zip(worst)
            .map(|(&name, max_relative_error)| JacobianStat {
                name,
                trials,
                max_relative_error,
            })
            .collect(),
    }
}

fn error_or_inf(analytic: Result<DMatrix<f64>>, numeric: &DMatrix<f64>) -> f64 {
    match analytic {
        Ok(a) => relative_error(&a, numeric),
        Err(_) => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(pc: &CameraPoint, k: &CameraIntrinsics) -> Result<Matrix2x6<f64>> {
        jacobian_wrt_pose(pc, k).map(|j| -j)
    }

    #[test]
    fn default_set_passes() {
        let report = check_jacobians(7, 200, &AnalyticJacobians::default());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sign_flip_is_caught() {
        let jac = AnalyticJacobians {
            wrt_pose: flipped,
            ..AnalyticJacobians::default()
        };
        let report = check_jacobians(7, 20, &jac);
        assert!(!report.passed());
        assert!(report.stats[0].max_relative_error > 1.0);
    }

    #[test]
    fn zero_trials_never_passes() {
        assert!(!check_jacobians(0, 0, &AnalyticJacobians::default()).passed());
    }
}
