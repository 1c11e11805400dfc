use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use super::solver::{levenberg_marquardt, solve_dense, LeastSquares};
use super::SolverConfig;
use crate::error::{Error, Result};
use crate::geometry::{jacobian_wrt_point, project_camera_point, CameraIntrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointOptions {
    pub solver: SolverConfig,
    /// Minimum triangulation angle between any two observing rays.
    pub min_parallax_deg: f64,
}

impl Default for PointOptions {
    fn default() -> Self {
        Self {
            solver: SolverConfig::point(),
            min_parallax_deg: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointEstimate {
    pub position: Vector3<f64>,
    pub cost: f64,
    pub iterations: usize,
}

struct PointProblem<'a> {
    observations: &'a [(Pose, Vector2<f64>)],
    k: &'a CameraIntrinsics,
}

impl LeastSquares for PointProblem<'_> {
    type State = Vector3<f64>;
    type System = (DMatrix<f64>, DVector<f64>);

    fn cost(&self, x: &Vector3<f64>) -> f64 {
        let mut total = 0.0;
        for (pose, z) in self.observations {
            match project_camera_point(self.k, &pose.transform_point(x)) {
                Ok(uv) => total += (z - uv).norm_squared(),
                Err(_) => return f64::INFINITY,
            }
        }
        0.5 * total
    }

    fn linearize(&self, x: &Vector3<f64>) -> Self::System {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (pose, z) in self.observations {
            let pc = pose.transform_point(x);
            let (Ok(uv), Ok(j)) = (
                project_camera_point(self.k, &pc),
                jacobian_wrt_point(&pc, pose, self.k),
            ) else {
                continue;
            };
            let e = z - uv;
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        (
            DMatrix::from_column_slice(3, 3, h.as_slice()),
            DVector::from_column_slice(g.as_slice()),
        )
    }

    fn solve(&self, sys: &Self::System, lambda: f64) -> Option<DVector<f64>> {
        solve_dense(&sys.0, &sys.1, lambda)
    }

    fn retract(&self, x: &Vector3<f64>, step: &DVector<f64>) -> Vector3<f64> {
        x + Vector3::new(step[0], step[1], step[2])
    }
}

/// Largest angle (degrees) between the rays from two observing cameras.
fn max_parallax_deg(observations: &[(Pose, Vector2<f64>)], x: &Vector3<f64>) -> f64 {
    let rays: Vec<Vector3<f64>> = observations
        .iter()
        .filter_map(|(pose, _)| (x - pose.center()).try_normalize(1e-12))
        .collect();
    let mut best = 0.0f64;
    for (i, a) in rays.iter().enumerate() {
        for b in &rays[i + 1..] {
            best = best.max(a.dot(b).clamp(-1.0, 1.0).acos());
        }
    }
    best.to_degrees()
}

/// Refines a map point from its multi-view observations with the camera poses
/// held fixed. Requires at least two views with enough parallax at `initial`.
pub fn refine_point(
    observations: &[(Pose, Vector2<f64>)],
    k: &CameraIntrinsics,
    initial: &Vector3<f64>,
) -> Result<PointEstimate> {
    refine_point_with(observations, k, initial, &PointOptions::default())
}

pub fn refine_point_with(
    observations: &[(Pose, Vector2<f64>)],
    k: &CameraIntrinsics,
    initial: &Vector3<f64>,
    opts: &PointOptions,
) -> Result<PointEstimate> {
    opts.solver.validate()?;
    if observations.len() < 2 {
        return Err(Error::InsufficientParallax { angle_deg: 0.0 });
    }
    let parallax = max_parallax_deg(observations, initial);
    if parallax < opts.min_parallax_deg {
        return Err(Error::InsufficientParallax {
            angle_deg: parallax,
        });
    }
    let problem = PointProblem { observations, k };
    if !problem.cost(initial).is_finite() {
        return Err(Error::NoValidResiduals);
    }
    let out = levenberg_marquardt(&problem, *initial, &opts.solver);
    Ok(PointEstimate {
        position: out.state,
        cost: out.cost,
        iterations: out.iterations,
    })
}

/// Observations of one point plus its initial position.
pub type PointTrack = (Vec<(Pose, Vector2<f64>)>, Vector3<f64>);

/// Independent refinement of many points.
pub fn refine_points(
    batch: &[PointTrack],
    k: &CameraIntrinsics,
    opts: &PointOptions,
) -> Vec<Result<PointEstimate>> {
    batch
        .iter()
        .map(|(obs, init)| refine_point_with(obs, k, init, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn views(x: &Vector3<f64>, offsets: &[f64]) -> Vec<(Pose, Vector2<f64>)> {
        offsets
            .iter()
            .map(|o| {
                let pose = Pose::from_translation(Vector3::new(-o, 0.0, 0.0));
                (pose, project(&pose, &cam(), x).unwrap())
            })
            .collect()
    }

    #[test]
    fn single_observation_is_rejected() {
        let x = Vector3::new(0.5, 0.2, 8.0);
        let obs = views(&x, &[0.0]);
        assert!(matches!(
            refine_point(&obs, &cam(), &x),
            Err(Error::InsufficientParallax { .. })
        ));
    }

    #[test]
    fn tiny_baseline_is_rejected() {
        let x = Vector3::new(0.5, 0.2, 8.0);
        let obs = views(&x, &[0.0, 0.01]);
        assert!(refine_point(&obs, &cam(), &x).is_err());
    }

    #[test]
    fn noise_free_two_view_converges() {
        let x = Vector3::new(0.5, 0.2, 8.0);
        let obs = views(&x, &[0.0, 1.0]);
        let est = refine_point(&obs, &cam(), &(x + Vector3::new(0.05, -0.02, 0.6))).unwrap();
        assert!((est.position - x).norm() < 1e-8, "{}", (est.position - x).norm());
    }

    #[test]
    fn order_independent() {
        let x = Vector3::new(-0.4, 0.3, 6.0);
        let mut obs = views(&x, &[0.0, 0.3, 0.6, 0.9]);
        for o in &mut obs {
            o.1 += Vector2::new(0.3, -0.2);
        }
        let init = x + Vector3::new(0.0, 0.0, 0.4);
        let a = refine_point(&obs, &cam(), &init).unwrap();
        obs.reverse();
        let b = refine_point(&obs, &cam(), &init).unwrap();
        assert!((a.position - b.position).norm() < 1e-9);
    }
}
