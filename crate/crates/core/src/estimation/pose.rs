use nalgebra::{DMatrix, DVector, Matrix6, Vector2, Vector3, Vector6};

use super::solver::{levenberg_marquardt, solve_dense, LeastSquares};
use super::{RobustKernel, SolverConfig, CHI2_2DOF_95};
use crate::error::{Error, Result};
use crate::geometry::{jacobian_wrt_pose, project_camera_point, CameraIntrinsics, Pose, Twist, Z_MIN};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseOptions {
    pub kernel: RobustKernel,
    pub solver: SolverConfig,
    /// Pixel noise used for the chi-square inlier test.
    pub inlier_sigma: f64,
    /// Re-optimizations on the current inlier set after the first solve.
    pub rejection_rounds: usize,
}

impl Default for PoseOptions {
    fn default() -> Self {
        Self {
            kernel: RobustKernel::default(),
            solver: SolverConfig::pose(),
            inlier_sigma: 1.0,
            rejection_rounds: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// One flag per input match.
    pub inliers: Vec<bool>,
    pub cost: f64,
    pub iterations: usize,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|f| **f).count()
    }
}

struct PoseProblem<'a> {
    points: Vec<(&'a Vector3<f64>, &'a Vector2<f64>)>,
    k: &'a CameraIntrinsics,
    kernel: RobustKernel,
}

impl LeastSquares for PoseProblem<'_> {
    type State = Pose;
    type System = (DMatrix<f64>, DVector<f64>);

    fn cost(&self, pose: &Pose) -> f64 {
        let mut total = 0.0;
        for (x, z) in &self.points {
            match project_camera_point(self.k, &pose.transform_point(x)) {
                Ok(uv) => total += self.kernel.rho((*z - uv).norm_squared()),
                Err(_) => return f64::INFINITY,
            }
        }
        0.5 * total
    }

    fn linearize(&self, pose: &Pose) -> Self::System {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, z) in &self.points {
            let pc = pose.transform_point(x);
            let (Ok(uv), Ok(j)) = (project_camera_point(self.k, &pc), jacobian_wrt_pose(&pc, self.k))
            else {
                continue;
            };
            let e = *z - uv;
            let w = self.kernel.weight(e.norm_squared());
            h += j.transpose() * j * w;
            g += j.transpose() * e * w;
        }
        (
            DMatrix::from_column_slice(6, 6, h.as_slice()),
            DVector::from_column_slice(g.as_slice()),
        )
    }

    fn solve(&self, sys: &Self::System, lambda: f64) -> Option<DVector<f64>> {
        solve_dense(&sys.0, &sys.1, lambda)
    }

    fn retract(&self, pose: &Pose, step: &DVector<f64>) -> Pose {
        let xi = Twist(Vector6::from_column_slice(step.as_slice()));
        pose.perturbed(&xi).unwrap_or(*pose)
    }
}

/// Minimizes `1/2 sum rho(|z_i - pi(T X_i)|^2)` over the world-to-camera pose.
pub fn optimize_pose(
    matches: &[(Vector3<f64>, Vector2<f64>)],
    k: &CameraIntrinsics,
    initial: &Pose,
    kernel: RobustKernel,
    cfg: &SolverConfig,
) -> Result<PoseEstimate> {
    let opts = PoseOptions {
        kernel,
        solver: *cfg,
        ..PoseOptions::default()
    };
    optimize_pose_with(matches, k, initial, &opts)
}

pub fn optimize_pose_with(
    matches: &[(Vector3<f64>, Vector2<f64>)],
    k: &CameraIntrinsics,
    initial: &Pose,
    opts: &PoseOptions,
) -> Result<PoseEstimate> {
    opts.solver.validate()?;
    if matches.len() < 4 {
        return Err(Error::Underdetermined {
            got: matches.len(),
            needed: 4,
        });
    }
    let valid: Vec<bool> = matches
        .iter()
        .map(|(x, _)| initial.transform_point(x).z > Z_MIN)
        .collect();
    if !valid.iter().any(|v| *v) {
        return Err(Error::NoValidResiduals);
    }
    let threshold = CHI2_2DOF_95 * opts.inlier_sigma * opts.inlier_sigma;

    let mut active = valid.clone();
    let mut pose = *initial;
    let mut iterations = 0;
    let mut cost = 0.0;
    let mut inliers = active.clone();
    for round in 0..=opts.rejection_rounds {
        let problem = PoseProblem {
            points: matches
                .iter()
                .zip(&active)
                .filter(|(_, a)| **a)
                .map(|((x, z), _)| (x, z))
                .collect(),
            k,
            kernel: opts.kernel,
        };
        let out = levenberg_marquardt(&problem, pose, &opts.solver);
        iterations += out.iterations;
        pose = out.state;
        cost = out.cost;

        inliers = matches
            .iter()
            .zip(&valid)
            .map(|((x, z), ok)| {
                *ok && project_camera_point(k, &pose.transform_point(x))
                    .map(|uv| (z - uv).norm_squared() < threshold)
                    .unwrap_or(false)
            })
            .collect();
        let count = inliers.iter().filter(|f| **f).count();
        if round == opts.rejection_rounds || inliers == active || count < 4 {
            break;
        }
        active = inliers.clone();
    }
    Ok(PoseEstimate {
        pose,
        inliers,
        cost,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, se3_exp};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(pose: &Pose) -> Vec<(Vector3<f64>, Vector2<f64>)> {
        let mut out = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                let pc = Vector3::new(i as f64 - 2.0, j as f64 - 1.5, 5.0 + (i * j) as f64 * 0.3);
                let x = pose.inverse().transform_point(&pc);
                out.push((x, project(pose, &cam(), &x).unwrap()));
            }
        }
        out
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let truth = se3_exp(&Twist::new(0.3, -0.1, 0.2, 0.05, 0.1, -0.02)).unwrap();
        let est = optimize_pose(&scene(&truth), &cam(), &truth, RobustKernel::default(), &SolverConfig::pose())
            .unwrap();
        assert_eq!(est.pose, truth);
        assert!(est.cost < 1e-20);
        assert_eq!(est.inlier_count(), 20);
    }

    #[test]
    fn converges_from_perturbation() {
        let truth = se3_exp(&Twist::new(0.3, -0.1, 0.2, 0.05, 0.1, -0.02)).unwrap();
        let start = truth.perturbed(&Twist::new(0.1, 0.05, -0.1, 0.03, -0.02, 0.04)).unwrap();
        let est = optimize_pose(&scene(&truth), &cam(), &start, RobustKernel::default(), &SolverConfig::pose())
            .unwrap();
        let (dt, dr) = est.pose.distance_to(&truth);
        assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
    }

    #[test]
    fn too_few_matches() {
        let truth = Pose::identity();
        let m = scene(&truth);
        assert!(matches!(
            optimize_pose(&m[..3], &cam(), &truth, RobustKernel::None, &SolverConfig::pose()),
            Err(Error::Underdetermined { got: 3, needed: 4 })
        ));
    }

    #[test]
    fn all_points_behind_camera() {
        let m: Vec<_> = (0..5)
            .map(|i| (Vector3::new(i as f64, 0.0, -2.0), Vector2::new(1.0, 1.0)))
            .collect();
        assert!(matches!(
            optimize_pose(&m, &cam(), &Pose::identity(), RobustKernel::None, &SolverConfig::pose()),
            Err(Error::NoValidResiduals)
        ));
    }
}
