//! Hierarchical local bundle adjustment.
//!
//! Recent keyframe poses, the local points they observe and one shared drift
//! transform `t_map` are optimized jointly against handcrafted observations of
//! the local map and learned-channel associations with the prior map. Prior
//! points enter the local frame as `t_map * X`, so the residual is
//! `z - pi(T_j * t_map * X)` with `T_j` the world-to-camera pose.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, Matrix6x3, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::estimation::{levenberg_marquardt_observed, IterationLog, RobustKernel, SolverConfig};
use crate::estimation::solver::LeastSquares;
use crate::features::Keypoint;
use crate::geometry::{
    jacobian_wrt_point, jacobian_wrt_pose, jacobian_wrt_pose_prior, jacobian_wrt_tmap,
    project_camera_point, se3_log, CameraIntrinsics, Pose, Twist, Z_MIN,
};
use crate::io_util::fmt_f64;
use crate::matching::MatchSet;
use crate::worldmap::VisualMap;

pub const DEFAULT_WINDOW_SIZE: usize = 8;
pub const DEFAULT_FIXED_SIZE: usize = 2;

const DUMP_MAGIC: &str = "HILOC-HBA v1";

/// Learned-channel matches of one flexible keyframe against the prior map.
/// `matches` indexes into `keypoints`.
#[derive(Clone, Debug)]
pub struct PriorAssociation {
    pub keyframe_id: u64,
    pub keypoints: Vec<Keypoint>,
    pub matches: MatchSet,
}

#[derive(Clone, Debug)]
pub struct LocalWindow {
    /// Most recent keyframes, oldest first.
    pub flexible: Vec<u64>,
    /// Older keyframes that constrain the window but are never updated.
    pub fixed: Vec<u64>,
    pub local_points: Vec<u64>,
    pub prior_assocs: Vec<PriorAssociation>,
    pub t_map: Pose,
}

impl LocalWindow {
    pub fn validate(&self, local_map: &VisualMap) -> Result<()> {
        if self.flexible.is_empty() {
            return Err(Error::invalid("window has no flexible keyframes"));
        }
        let flexible: BTreeSet<u64> = self.flexible.iter().copied().collect();
        if flexible.len() != self.flexible.len() {
            return Err(Error::invalid("duplicate flexible keyframe"));
        }
        if self.fixed.iter().any(|id| flexible.contains(id)) {
            return Err(Error::invalid("keyframe both flexible and fixed"));
        }
        for id in self.flexible.iter().chain(&self.fixed) {
            if !local_map.keyframes.contains_key(id) {
                return Err(Error::Integrity(format!("window keyframe {id} not in map")));
            }
        }
        for id in &self.local_points {
            let p = local_map
                .points
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("window point {id} not in map")))?;
            if !p.observations.iter().any(|o| flexible.contains(&o.keyframe_id)) {
                return Err(Error::Integrity(format!(
                    "point {id} not observed by a flexible keyframe"
                )));
            }
        }
        for a in &self.prior_assocs {
            if !flexible.contains(&a.keyframe_id) {
                return Err(Error::Integrity(format!(
                    "prior association on non-flexible keyframe {}",
                    a.keyframe_id
                )));
            }
        }
        Ok(())
    }

    pub fn prior_match_count(&self) -> usize {
        self.prior_assocs.iter().map(|a| a.matches.len()).sum()
    }
}

/// Takes the last `window_size` keyframes (by id) as flexible and the
/// `fixed_size` before them as fixed.
pub fn build_window(local_map: &VisualMap, window_size: usize, fixed_size: usize) -> LocalWindow {
    let ids: Vec<u64> = local_map.keyframes.keys().copied().collect();
    let split = ids.len().saturating_sub(window_size);
    let flexible = ids[split..].to_vec();
    let fixed = ids[split.saturating_sub(fixed_size)..split].to_vec();
    let flex_set: BTreeSet<u64> = flexible.iter().copied().collect();
    let local_points = local_map
        .points
        .values()
        .filter(|p| p.observations.iter().any(|o| flex_set.contains(&o.keyframe_id)))
        .map(|p| p.id)
        .collect();
    LocalWindow {
        flexible,
        fixed,
        local_points,
        prior_assocs: Vec::new(),
        t_map: Pose::identity(),
    }
}

#[derive(Clone, Copy, Debug)]
enum FrameSlot {
    Flexible(usize),
    Fixed(Pose),
}

#[derive(Clone, Copy, Debug)]
struct LocalResidual {
    point: usize,
    frame: FrameSlot,
    z: Vector2<f64>,
    k: CameraIntrinsics,
}

#[derive(Clone, Copy, Debug)]
struct PriorResidual {
    frame: usize,
    x: Vector3<f64>,
    z: Vector2<f64>,
    k: CameraIntrinsics,
}

#[derive(Clone, Debug, PartialEq)]
struct BundleState {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
    t_map: Pose,
}

struct BundleProblem {
    local: Vec<LocalResidual>,
    prior: Vec<PriorResidual>,
    kernel: RobustKernel,
    n_poses: usize,
    n_points: usize,
    estimate_tmap: bool,
}

struct PointBlock {
    c: Matrix3<f64>,
    g: Vector3<f64>,
    couplings: Vec<(usize, Matrix6x3<f64>)>,
}

struct BundleSystem {
    a: DMatrix<f64>,
    g: DVector<f64>,
    points: Vec<PointBlock>,
}

impl BundleProblem {
    fn pose_params(&self) -> usize {
        6 * self.n_poses + if self.estimate_tmap { 6 } else { 0 }
    }

    fn frame_pose<'a>(&self, state: &'a BundleState, slot: &'a FrameSlot) -> &'a Pose {
        match slot {
            FrameSlot::Flexible(j) => &state.poses[*j],
            FrameSlot::Fixed(p) => p,
        }
    }

    fn local_error(&self, state: &BundleState, r: &LocalResidual) -> Option<(Vector3<f64>, Vector2<f64>)> {
        let pc = self.frame_pose(state, &r.frame).transform_point(&state.points[r.point]);
        project_camera_point(&r.k, &pc).ok().map(|uv| (pc, r.z - uv))
    }

    fn prior_error(
        &self,
        state: &BundleState,
        r: &PriorResidual,
    ) -> Option<(Vector3<f64>, Vector3<f64>, Vector2<f64>)> {
        let aligned = state.t_map.transform_point(&r.x);
        let pc = state.poses[r.frame].transform_point(&aligned);
        project_camera_point(&r.k, &pc).ok().map(|uv| (aligned, pc, r.z - uv))
    }

    fn add_pose_block(a: &mut DMatrix<f64>, i: usize, j: usize, block: &nalgebra::Matrix6<f64>) {
        let mut view = a.view_mut((6 * i, 6 * j), (6, 6));
        view += block;
    }
}

impl LeastSquares for BundleProblem {
    type State = BundleState;
    type System = BundleSystem;

    fn cost(&self, state: &BundleState) -> f64 {
        let mut total = 0.0;
        for r in &self.local {
            match self.local_error(state, r) {
                Some((_, e)) => total += self.kernel.rho(e.norm_squared()),
                None => return f64::INFINITY,
            }
        }
        for r in &self.prior {
            match self.prior_error(state, r) {
                Some((_, _, e)) => total += self.kernel.rho(e.norm_squared()),
                None => return f64::INFINITY,
            }
        }
        0.5 * total
    }

    fn linearize(&self, state: &BundleState) -> BundleSystem {
        let np = self.pose_params();
        let mut a = DMatrix::zeros(np, np);
        let mut g = DVector::zeros(np);
        let mut points: Vec<PointBlock> = (0..self.n_points)
            .map(|_| PointBlock {
                c: Matrix3::zeros(),
                g: Vector3::zeros(),
                couplings: Vec::new(),
            })
            .collect();

        for r in &self.local {
            let Some((pc, e)) = self.local_error(state, r) else { continue };
            let pose = self.frame_pose(state, &r.frame);
            let (Ok(jx), Ok(jt)) = (jacobian_wrt_point(&pc, pose, &r.k), jacobian_wrt_pose(&pc, &r.k))
            else {
                continue;
            };
            let w = self.kernel.weight(e.norm_squared());
            let block = &mut points[r.point];
            block.c += jx.transpose() * jx * w;
            block.g += jx.transpose() * e * w;
            if let FrameSlot::Flexible(j) = r.frame {
                Self::add_pose_block(&mut a, j, j, &(jt.transpose() * jt * w));
                let mut gv = g.rows_mut(6 * j, 6);
                gv += jt.transpose() * e * w;
                let coupling = jt.transpose() * jx * w;
                match block.couplings.iter_mut().find(|(f, _)| *f == j) {
                    Some((_, m)) => *m += coupling,
                    None => block.couplings.push((j, coupling)),
                }
            }
        }

        let m = self.n_poses;
        for r in &self.prior {
            let Some((aligned, pc, e)) = self.prior_error(state, r) else { continue };
            let pose = &state.poses[r.frame];
            let Ok(jt) = jacobian_wrt_pose_prior(&pc, &r.k) else { continue };
            let w = self.kernel.weight(e.norm_squared());
            let j = r.frame;
            Self::add_pose_block(&mut a, j, j, &(jt.transpose() * jt * w));
            let mut gv = g.rows_mut(6 * j, 6);
            gv += jt.transpose() * e * w;
            if self.estimate_tmap {
                let Ok(jm): Result<Matrix2x6<f64>> = jacobian_wrt_tmap(&pc, &aligned, pose, &r.k) else {
                    continue;
                };
                let cross = jt.transpose() * jm * w;
                Self::add_pose_block(&mut a, j, m, &cross);
                Self::add_pose_block(&mut a, m, j, &cross.transpose());
                Self::add_pose_block(&mut a, m, m, &(jm.transpose() * jm * w));
                let mut gm = g.rows_mut(6 * m, 6);
                gm += jm.transpose() * e * w;
            }
        }
        BundleSystem { a, g, points }
    }

    fn solve(&self, sys: &BundleSystem, lambda: f64) -> Option<DVector<f64>> {
        let np = self.pose_params();
        let mut s = sys.a.clone();
        for i in 0..np {
            s[(i, i)] += lambda * s[(i, i)].max(1e-12);
        }
        let mut rhs = -&sys.g;
        let mut inverses = Vec::with_capacity(sys.points.len());
        for block in &sys.points {
            let mut c = block.c;
            for i in 0..3 {
                c[(i, i)] += lambda * c[(i, i)].max(1e-12);
            }
            let cinv = c.cholesky().map(|ch| ch.inverse()).or_else(|| c.try_inverse())?;
            for (fa, ba) in &block.couplings {
                let bc = ba * cinv;
                let mut r = rhs.rows_mut(6 * fa, 6);
                r += bc * block.g;
                for (fb, bb) in &block.couplings {
                    let mut v = s.view_mut((6 * fa, 6 * fb), (6, 6));
                    v -= bc * bb.transpose();
                }
            }
            inverses.push(cinv);
        }
        let dp = match s.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => s.lu().solve(&rhs)?,
        };
        let mut step = DVector::zeros(np + 3 * self.n_points);
        step.rows_mut(0, np).copy_from(&dp);
        for (i, (block, cinv)) in sys.points.iter().zip(&inverses).enumerate() {
            let mut r = -block.g;
            for (f, b) in &block.couplings {
                r -= b.transpose() * dp.fixed_rows::<6>(6 * f);
            }
            step.fixed_rows_mut::<3>(np + 3 * i).copy_from(&(cinv * r));
        }
        if step.iter().all(|v| v.is_finite()) {
            Some(step)
        } else {
            None
        }
    }

    fn retract(&self, state: &BundleState, step: &DVector<f64>) -> BundleState {
        let twist = |i: usize| Twist(Vector6::from_iterator(step.rows(6 * i, 6).iter().copied()));
        let poses = state
            .poses
            .iter()
            .enumerate()
            .map(|(j, p)| p.perturbed(&twist(j)).unwrap_or(*p))
            .collect();
        let t_map = if self.estimate_tmap {
            state.t_map.perturbed(&twist(self.n_poses)).unwrap_or(state.t_map)
        } else {
            state.t_map
        };
        let base = self.pose_params();
        let points = state
            .points
            .iter()
            .enumerate()
            .map(|(i, x)| x + step.fixed_rows::<3>(base + 3 * i))
            .collect();
        BundleState {
            poses,
            points,
            t_map,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HbaIteration {
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
    /// `t_map` after the iteration.
    pub t_map: Twist,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub local_residuals: usize,
    pub prior_residuals: usize,
    pub history: Vec<HbaIteration>,
}

impl CostReport {
    /// Writes the per-iteration diagnostic dump.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{DUMP_MAGIC}")?;
        writeln!(
            out,
            "# initial_cost {} local_residuals {} prior_residuals {}",
            fmt_f64(self.initial_cost),
            self.local_residuals,
            self.prior_residuals
        )?;
        for (i, it) in self.history.iter().enumerate() {
            let v = it.t_map.as_vector();
            writeln!(
                out,
                "{} {} {} {} {} {} {} {} {} {}",
                i + 1,
                fmt_f64(it.cost),
                fmt_f64(it.lambda),
                u8::from(it.accepted),
                fmt_f64(v[0]),
                fmt_f64(v[1]),
                fmt_f64(v[2]),
                fmt_f64(v[3]),
                fmt_f64(v[4]),
                fmt_f64(v[5]),
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BundleResult {
    /// Flexible keyframe poses, in window order.
    pub poses: Vec<(u64, Pose)>,
    pub points: Vec<(u64, Vector3<f64>)>,
    pub t_map: Pose,
    pub report: CostReport,
}

impl BundleResult {
    /// Copies the optimized poses and points into `map`.
    pub fn write_back(&self, map: &mut VisualMap) {
        for (id, pose) in &self.poses {
            if let Some(kf) = map.keyframes.get_mut(id) {
                kf.pose = *pose;
            }
        }
        for (id, x) in &self.points {
            if let Some(p) = map.points.get_mut(id) {
                p.position = *x;
            }
        }
    }
}

fn assemble(
    window: &LocalWindow,
    local_map: &VisualMap,
    prior: &VisualMap,
    kernel: RobustKernel,
) -> Result<(BundleProblem, BundleState)> {
    window.validate(local_map)?;
    let flex_index = |id: u64| window.flexible.iter().position(|f| *f == id);
    let fixed: BTreeSet<u64> = window.fixed.iter().copied().collect();
    let state = BundleState {
        poses: window.flexible.iter().map(|id| local_map.keyframes[id].pose).collect(),
        points: window.local_points.iter().map(|id| local_map.points[id].position).collect(),
        t_map: window.t_map,
    };

    let mut local = Vec::new();
    for (i, id) in window.local_points.iter().enumerate() {
        for obs in &local_map.points[id].observations {
            let kf = &local_map.keyframes[&obs.keyframe_id];
            let frame = match flex_index(obs.keyframe_id) {
                Some(j) => FrameSlot::Flexible(j),
                None if fixed.contains(&obs.keyframe_id) => FrameSlot::Fixed(kf.pose),
                None => continue,
            };
            let Some(kp) = kf.keypoints.get(obs.keypoint_index) else { continue };
            local.push(LocalResidual {
                point: i,
                frame,
                z: kp.pixel,
                k: kf.intrinsics,
            });
        }
    }

    let mut prior_res = Vec::new();
    for assoc in &window.prior_assocs {
        let j = flex_index(assoc.keyframe_id).expect("validated");
        let k = local_map.keyframes[&assoc.keyframe_id].intrinsics;
        for m in &assoc.matches.pairs {
            let (Some(p), Some(kp)) = (prior.points.get(&m.point_id), assoc.keypoints.get(m.keypoint_index))
            else {
                continue;
            };
            prior_res.push(PriorResidual {
                frame: j,
                x: p.position,
                z: kp.pixel,
                k,
            });
        }
    }

    let mut problem = BundleProblem {
        local,
        prior: prior_res,
        kernel,
        n_poses: window.flexible.len(),
        n_points: window.local_points.len(),
        estimate_tmap: false,
    };
    // Residuals already behind the camera carry no usable information.
    problem.local.retain(|r| {
        problem_depth(&state, r) > Z_MIN
    });
    problem.prior.retain(|r| {
        let pc = state.poses[r.frame].transform_point(&state.t_map.transform_point(&r.x));
        pc.z > Z_MIN
    });
    problem.estimate_tmap = !problem.prior.is_empty();
    Ok((problem, state))
}

fn problem_depth(state: &BundleState, r: &LocalResidual) -> f64 {
    let pose = match &r.frame {
        FrameSlot::Flexible(j) => &state.poses[*j],
        FrameSlot::Fixed(p) => p,
    };
    pose.transform_point(&state.points[r.point]).z
}

/// Total robustified window cost at the current map state and `window.t_map`.
pub fn window_cost(
    window: &LocalWindow,
    local_map: &VisualMap,
    prior: &VisualMap,
    kernel: RobustKernel,
) -> Result<f64> {
    let (problem, state) = assemble(window, local_map, prior, kernel)?;
    Ok(problem.cost(&state))
}

/// Jointly optimizes the flexible poses, the local points and `t_map`.
/// Fixed keyframes and prior points only contribute residuals. Without any
/// prior association `t_map` is unobservable and returned unchanged.
pub fn local_bundle_adjust(
    window: &LocalWindow,
    local_map: &VisualMap,
    prior: &VisualMap,
    kernel: RobustKernel,
    cfg: &SolverConfig,
) -> Result<BundleResult> {
    cfg.validate()?;
    let (problem, state) = assemble(window, local_map, prior, kernel)?;
    let mut history = Vec::new();
    let outcome = levenberg_marquardt_observed(&problem, state, cfg, |log: &IterationLog, s: &BundleState| {
        history.push(HbaIteration {
            cost: log.cost,
            lambda: log.lambda,
            accepted: log.accepted,
            t_map: se3_log(&s.t_map).unwrap_or_else(|_| Twist::zero()),
        });
    });
    let state = outcome.state;
    Ok(BundleResult {
        poses: window.flexible.iter().copied().zip(state.poses).collect(),
        points: window.local_points.iter().copied().zip(state.points).collect(),
        t_map: state.t_map,
        report: CostReport {
            initial_cost: outcome.initial_cost,
            final_cost: outcome.cost,
            iterations: outcome.iterations,
            converged: outcome.converged,
            local_residuals: problem.local.len(),
            prior_residuals: problem.prior.len(),
            history,
        },
    })
}

/// Folds `t_map` into the flexible poses (`T <- T * t_map`) and the local
/// points (`X <- t_map^-1 * X`), then resets the window drift to identity.
pub fn apply_correction(window: &mut LocalWindow, t_map: &Pose, local_map: &mut VisualMap) {
    if *t_map != Pose::identity() {
        local_map.apply_rigid_correction(t_map, &window.flexible, &window.local_points);
    }
    window.t_map = Pose::identity();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Channel;
    use crate::geometry::{project, se3_exp};
    use crate::matching::MatchPair;
    use crate::worldmap::{Keyframe, MapPoint, Observation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap()
    }

    struct Scene {
        truth: Vec<Pose>,
        points: Vec<Vector3<f64>>,
    }

    fn scene(rng: &mut ChaCha8Rng, frames: usize, n_points: usize) -> Scene {
        let truth = (0..frames)
            .map(|i| {
                let t = i as f64;
                se3_exp(&Twist::new(-0.25 * t, 0.02 * t, 0.0, 0.0, 0.01 * t, 0.0))
                    .unwrap()
            })
            .collect();
        let points = (0..n_points)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-3.0..4.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(6.0..10.0),
                )
            })
            .collect();
        Scene { truth, points }
    }

    /// Local map seen through drift `d`, plus a prior map in the true frame
    /// with one association set per keyframe id listed in `aligned`.
    fn drifted(sc: &Scene, d: &Pose, aligned: &[u64]) -> (VisualMap, VisualMap, Vec<PriorAssociation>) {
        let k = cam();
        let dinv = d.inverse();
        let mut local = VisualMap::new(Channel::Handcrafted, 1);
        let mut prior = VisualMap::new(Channel::Learned, 1);
        let desc = DVector::from_element(1, 1.0);
        let mut obs: Vec<Vec<Observation>> = vec![Vec::new(); sc.points.len()];
        let mut assocs = Vec::new();
        for (f, gt) in sc.truth.iter().enumerate() {
            let id = f as u64 + 1;
            let mut kps = Vec::new();
            let mut pairs = Vec::new();
            for (i, x) in sc.points.iter().enumerate() {
                let Ok(uv) = project(gt, &k, x) else { continue };
                if !k.contains(&uv) {
                    continue;
                }
                obs[i].push(Observation {
                    keyframe_id: id,
                    keypoint_index: kps.len(),
                });
                pairs.push(MatchPair {
                    point_id: i as u64,
                    keypoint_index: kps.len(),
                    distance: 0.0,
                    residual: Vector2::zeros(),
                });
                kps.push(Keypoint {
                    pixel: uv,
                    score: 1.0,
                    descriptor: desc.clone(),
                    channel: Channel::Handcrafted,
                });
            }
            if aligned.contains(&id) {
                assocs.push(PriorAssociation {
                    keyframe_id: id,
                    keypoints: kps.clone(),
                    matches: MatchSet {
                        pairs,
                        source_channel: Channel::Learned,
                    },
                });
            }
            local
                .insert_keyframe(Keyframe {
                    id,
                    timestamp: f as f64,
                    pose: gt.compose(&dinv),
                    intrinsics: k,
                    keypoints: kps,
                    right_coords: None,
                })
                .unwrap();
        }
        for (i, x) in sc.points.iter().enumerate() {
            let mk = |pos, observations, channel| MapPoint {
                id: i as u64,
                position: pos,
                descriptor: desc.clone(),
                mean_view_dir: Vector3::z(),
                observations,
                channel,
            };
            prior.points.insert(i as u64, mk(*x, Vec::new(), Channel::Learned));
            if !obs[i].is_empty() {
                local
                    .insert_point(mk(d.transform_point(x), obs[i].clone(), Channel::Handcrafted))
                    .unwrap();
            }
        }
        (local, prior, assocs)
    }

    fn ids(a: u64, b: u64) -> Vec<u64> {
        (a..=b).collect()
    }

    #[test]
    fn window_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sc = scene(&mut rng, 20, 40);
        let (local, _, _) = drifted(&sc, &Pose::identity(), &[]);
        let w = build_window(&local, 8, 2);
        assert_eq!(w.flexible, ids(13, 20));
        assert_eq!(w.fixed, vec![11, 12]);

        let (small, _, _) = drifted(&scene(&mut rng, 3, 10), &Pose::identity(), &[]);
        let w = build_window(&small, 8, 2);
        assert_eq!(w.flexible, vec![1, 2, 3]);
        assert!(w.fixed.is_empty());
    }

    #[test]
    fn local_points_are_union_of_flexible_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sc = scene(&mut rng, 12, 80);
        let (local, _, _) = drifted(&sc, &Pose::identity(), &[]);
        let w = build_window(&local, 4, 2);
        let mut expected = BTreeSet::new();
        for id in &w.flexible {
            for p in local.points.values() {
                if p.observations.iter().any(|o| o.keyframe_id == *id) {
                    expected.insert(p.id);
                }
            }
        }
        assert_eq!(w.local_points, expected.into_iter().collect::<Vec<_>>());
        w.validate(&local).unwrap();
    }

    #[test]
    fn empty_window_is_rejected() {
        let map = VisualMap::new(Channel::Handcrafted, 1);
        let w = build_window(&map, 8, 2);
        assert!(matches!(
            local_bundle_adjust(&w, &map, &map, RobustKernel::None, &SolverConfig::bundle()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sc = scene(&mut rng, 10, 60);
        let (local, prior, assocs) = drifted(&sc, &Pose::identity(), &ids(3, 10));
        let mut w = build_window(&local, 8, 2);
        w.prior_assocs = assocs;
        let out = local_bundle_adjust(&w, &local, &prior, RobustKernel::default(), &SolverConfig::bundle())
            .unwrap();
        assert!(out.report.final_cost < 1e-16);
        for (id, pose) in &out.poses {
            let (dt, dr) = pose.distance_to(&local.keyframes[id].pose);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
        assert_eq!(out.t_map, Pose::identity());
    }

    #[test]
    fn recovers_injected_drift() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let sc = scene(&mut rng, 10, 60);
            let d = se3_exp(&Twist::new(0.3, -0.2, 0.1, 0.02, -0.04, 0.03)).unwrap();
            let (mut local, prior, assocs) = drifted(&sc, &d, &ids(3, 10));
            let fixed_before: Vec<Pose> = [1u64, 2].iter().map(|i| local.keyframes[i].pose).collect();
            let mut w = build_window(&local, 8, 2);
            w.prior_assocs = assocs;
            let out = local_bundle_adjust(&w, &local, &prior, RobustKernel::default(), &SolverConfig::bundle())
                .unwrap();
            let (dt, dr) = out.t_map.compose(&d.inverse()).distance_to(&Pose::identity());
            assert!(dt < 1e-6 && dr < 1e-6, "seed {seed}: {dt} {dr}");
            out.write_back(&mut local);
            apply_correction(&mut w, &out.t_map, &mut local);
            for id in &w.flexible {
                let (dt, dr) = local.keyframes[id].pose.distance_to(&sc.truth[*id as usize - 1]);
                assert!(dt < 1e-6 && dr < 1e-6);
            }
            let fixed_after: Vec<Pose> = [1u64, 2].iter().map(|i| local.keyframes[i].pose).collect();
            assert_eq!(fixed_before, fixed_after);
            assert_eq!(w.t_map, Pose::identity());
        }
    }

    #[test]
    fn no_prior_keeps_tmap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sc = scene(&mut rng, 10, 60);
        let (mut local, prior, _) = drifted(&sc, &Pose::identity(), &[]);
        for p in local.points.values_mut() {
            p.position.x += 0.01;
        }
        let w = build_window(&local, 8, 2);
        let out = local_bundle_adjust(&w, &local, &prior, RobustKernel::None, &SolverConfig::bundle()).unwrap();
        assert_eq!(out.t_map, Pose::identity());
        assert_eq!(out.report.prior_residuals, 0);
        assert!(out.report.final_cost < out.report.initial_cost);
    }

    #[test]
    fn gauge_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sc = scene(&mut rng, 10, 60);
        let d = se3_exp(&Twist::new(0.1, 0.0, -0.1, 0.01, 0.0, 0.02)).unwrap();
        let (mut local, prior, assocs) = drifted(&sc, &d, &ids(4, 10));
        for p in local.points.values_mut() {
            p.position += Vector3::new(0.02, -0.01, 0.03);
        }
        let mut w = build_window(&local, 8, 2);
        w.prior_assocs = assocs;
        w.t_map = se3_exp(&Twist::new(0.05, 0.02, 0.0, 0.0, 0.01, 0.0)).unwrap();
        let before = window_cost(&w, &local, &prior, RobustKernel::default()).unwrap();
        let g = se3_exp(&Twist::new(0.4, -0.3, 0.2, 0.1, 0.05, -0.08)).unwrap();
        local.apply_rigid_correction_all(&g);
        w.t_map = g.inverse().compose(&w.t_map);
        let after = window_cost(&w, &local, &prior, RobustKernel::default()).unwrap();
        assert!(before > 1.0);
        assert!((before - after).abs() < 1e-10 * before.max(1.0), "{before} {after}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sc = scene(&mut rng, 6, 25);
        let d = se3_exp(&Twist::new(0.05, 0.02, -0.03, 0.01, 0.0, 0.01)).unwrap();
        let (mut local, prior, assocs) = drifted(&sc, &d, &ids(3, 6));
        for p in local.points.values_mut() {
            p.position += Vector3::new(rng.random_range(-0.05..0.05), 0.02, -0.04);
        }
        let mut w = build_window(&local, 4, 2);
        w.prior_assocs = assocs;
        let (problem, state) = assemble(&w, &local, &prior, RobustKernel::None).unwrap();
        assert!(problem.estimate_tmap);
        let sys = problem.linearize(&state);
        let np = problem.pose_params();
        let n = np + 3 * problem.n_points;
        let h = 1e-6;
        let mut analytic = DVector::zeros(n);
        analytic.rows_mut(0, np).copy_from(&sys.g);
        for (i, b) in sys.points.iter().enumerate() {
            analytic.fixed_rows_mut::<3>(np + 3 * i).copy_from(&b.g);
        }
        let mut numeric = DVector::zeros(n);
        for i in 0..n {
            let mut step = DVector::zeros(n);
            step[i] = h;
            let plus = problem.cost(&problem.retract(&state, &step));
            step[i] = -h;
            let minus = problem.cost(&problem.retract(&state, &step));
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        let rel = (&analytic - &numeric).norm() / numeric.norm();
        assert!(rel < 1e-5, "{rel}");
    }

    #[test]
    fn identity_correction_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sc = scene(&mut rng, 5, 20);
        let (mut local, _, _) = drifted(&sc, &Pose::identity(), &[]);
        let before = local.clone();
        let mut w = build_window(&local, 8, 2);
        apply_correction(&mut w, &Pose::identity(), &mut local);
        assert_eq!(before, local);
    }

    #[test]
    fn diagnostic_dump_has_one_line_per_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sc = scene(&mut rng, 6, 30);
        let d = se3_exp(&Twist::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.02)).unwrap();
        let (local, prior, assocs) = drifted(&sc, &d, &ids(2, 6));
        let mut w = build_window(&local, 8, 2);
        w.prior_assocs = assocs;
        let out = local_bundle_adjust(&w, &local, &prior, RobustKernel::None, &SolverConfig::bundle()).unwrap();
        let mut buf = Vec::new();
        out.report.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines[0], "HILOC-HBA v1");
        assert_eq!(lines.len() - 1, out.report.iterations);
    }
}
