//! Synthetic worlds and stereo sequences.
//!
//! Every world point carries one descriptor per channel. A localization
//! session perturbs both by a per-session drift: large for the handcrafted
//! channel (so it stops matching the mapping session) and small for the
//! learned one. All randomness derives from a single seed; each frame draws
//! from its own ChaCha stream so frames can be rendered lazily in any order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::features::{Channel, Descriptor, FeatureGrid, Keypoint, GRID_RATIO};
use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::io_util::{fmt_f64, fmt_sig, parse_f64, LineReader};
use crate::pipeline::{FrameInput, FrameSource, LearnedInput};
use crate::worldmap::{Keyframe, MapPoint, Observation, VisualMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    pub num_points: usize,
    /// Box size; points are uniform in `[-extent/2, extent/2]`.
    pub extent: Vector3<f64>,
    pub descriptor_dim: usize,
    pub rng_seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_points < 1 {
            return Err(Error::invalid("num_points must be >= 1"));
        }
        if !self.extent.iter().all(|e| *e > 0.0 && e.is_finite()) {
            return Err(Error::invalid("extent must be positive"));
        }
        if self.descriptor_dim < 1 {
            return Err(Error::invalid("descriptor_dim must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldPoint {
    pub position: Vector3<f64>,
    pub handcrafted: Descriptor,
    pub learned: Descriptor,
}

impl WorldPoint {
    pub fn descriptor(&self, channel: Channel) -> &Descriptor {
        match channel {
            Channel::Handcrafted => &self.handcrafted,
            Channel::Learned => &self.learned,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub points: Vec<WorldPoint>,
    pub descriptor_dim: usize,
}

impl World {
    /// Drops points closer than `clearance` to any of `path`.
    pub fn clear_of(&self, path: &[Vector3<f64>], clearance: f64) -> World {
        let c2 = clearance * clearance;
        World {
            points: self
                .points
                .iter()
                .filter(|p| path.iter().all(|c| (p.position - c).norm_squared() > c2))
                .cloned()
                .collect(),
            descriptor_dim: self.descriptor_dim,
        }
    }

    /// Points only (no keyframes), with point ids equal to their index.
    pub fn to_map(&self, channel: Channel) -> VisualMap {
        let mut map = VisualMap::new(channel, self.descriptor_dim);
        for (i, p) in self.points.iter().enumerate() {
            map.points.insert(
                i as u64,
                MapPoint {
                    id: i as u64,
                    position: p.position,
                    descriptor: p.descriptor(channel).clone(),
                    mean_view_dir: Vector3::z(),
                    observations: Vec::new(),
                    channel,
                },
            );
        }
        map
    }
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Descriptor {
    loop {
        let v = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotates `d` by `drift * pi/2` toward a fresh random direction.
pub fn drift_descriptor(d: &Descriptor, drift: f64, rng: &mut impl Rng) -> Descriptor {
    let r = random_unit(rng, d.len());
    if drift == 0.0 || d.len() < 2 {
        return d.clone();
    }
    let theta = drift * std::f64::consts::FRAC_PI_2;
    let perp = &r - d * r.dot(d);
    let perp = match perp.try_normalize(1e-9) {
        Some(p) => p,
        None => {
            let mut e = DVector::zeros(d.len());
            let i = if d[0].abs() < 0.9 { 0 } else { 1 };
            e[i] = 1.0;
            (&e - d * e.dot(d)).normalize()
        }
    };
    d * theta.cos() + perp * theta.sin()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let half = cfg.extent * 0.5;
    let points = (0..cfg.num_points)
        .map(|_| {
            let position = Vector3::new(
                rng.random_range(-half.x..=half.x),
                rng.random_range(-half.y..=half.y),
                rng.random_range(-half.z..=half.z),
            );
            let handcrafted = random_unit(&mut rng, cfg.descriptor_dim);
            let learned = random_unit(&mut rng, cfg.descriptor_dim);
            WorldPoint {
                position,
                handcrafted,
                learned,
            }
        })
        .collect();
    Ok(World {
        points,
        descriptor_dim: cfg.descriptor_dim,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearanceModel {
    pub learned_drift: f64,
    pub handcrafted_drift: f64,
    /// Fraction of the path covered by regions without usable learned features.
    pub dropout_learned: f64,
    /// Length in meters of one dropout region.
    pub region_dropout_length: f64,
}

impl Default for AppearanceModel {
    fn default() -> Self {
        Self {
            learned_drift: 0.1,
            handcrafted_drift: 0.8,
            dropout_learned: 0.0,
            region_dropout_length: 6.0,
        }
    }
}

impl AppearanceModel {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.learned_drift) && unit(self.handcrafted_drift) && unit(self.dropout_learned)) {
            return Err(Error::invalid("drifts and dropout must lie in [0, 1]"));
        }
        if !(self.region_dropout_length > 0.0) {
            return Err(Error::invalid("region_dropout_length must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseModel {
    pub pixel_sigma: f64,
    pub detection_dropout: f64,
    pub outlier_rate: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.pixel_sigma >= 0.0 && unit(self.detection_dropout) && unit(self.outlier_rate)) {
            return Err(Error::invalid("noise must be non-negative, probabilities in [0, 1]"));
        }
        Ok(())
    }
}

/// World-to-camera pose of a camera at `position` looking along `forward`
/// with the world z axis up (camera x right, y down, z forward).
pub fn look_along(position: &Vector3<f64>, forward: &Vector3<f64>) -> Result<Pose> {
    let z = forward
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("zero forward direction"))?;
    let x = z
        .cross(&Vector3::z())
        .try_normalize(1e-9)
        .ok_or_else(|| Error::invalid("forward direction parallel to up"))?;
    let y = z.cross(&x);
    let r_wc = Matrix3::from_columns(&[x, y, z]);
    Ok(Pose::new(r_wc, *position)?.inverse())
}

pub fn line_trajectory(
    start: &Vector3<f64>,
    direction: &Vector3<f64>,
    speed: f64,
    fps: f64,
    n: usize,
) -> Result<Vec<Pose>> {
    let dir = direction
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("zero direction"))?;
    (0..n)
        .map(|i| look_along(&(start + dir * (speed * i as f64 / fps)), &dir))
        .collect()
}

/// One counter-clockwise loop, camera facing the direction of travel.
pub fn circle_trajectory(center: &Vector3<f64>, radius: f64, n: usize) -> Result<Vec<Pose>> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let p = center + Vector3::new(radius * a.cos(), radius * a.sin(), 0.0);
            look_along(&p, &Vector3::new(-a.sin(), a.cos(), 0.0))
        })
        .collect()
}

/// One loop of `(a sin s, b sin s cos s)` reparametrized to constant speed.
pub fn figure_eight_trajectory(
    center: &Vector3<f64>,
    half_width: f64,
    half_height: f64,
    n: usize,
) -> Result<Vec<Pose>> {
    if !(half_width > 0.0 && half_height > 0.0) {
        return Err(Error::invalid("figure-eight size must be positive"));
    }
    let (a, b) = (half_width, half_height);
    let curve = |s: f64| center + Vector3::new(a * s.sin(), b * s.sin() * s.cos(), 0.0);
    let tangent = |s: f64| Vector3::new(a * s.cos(), b * (2.0 * s).cos(), 0.0);
    const SAMPLES: usize = 20_000;
    let mut cumulative = Vec::with_capacity(SAMPLES + 1);
    cumulative.push(0.0);
    let mut prev = curve(0.0);
    for k in 1..=SAMPLES {
        let p = curve(std::f64::consts::TAU * k as f64 / SAMPLES as f64);
        cumulative.push(cumulative[k - 1] + (p - prev).norm());
        prev = p;
    }
    let total = cumulative[SAMPLES];
    (0..n)
        .map(|i| {
            let target = total * i as f64 / n as f64;
            let k = cumulative.partition_point(|c| *c < target).clamp(1, SAMPLES);
            let (l0, l1) = (cumulative[k - 1], cumulative[k]);
            let frac = if l1 > l0 { (target - l0) / (l1 - l0) } else { 0.0 };
            let s = std::f64::consts::TAU * ((k - 1) as f64 + frac) / SAMPLES as f64;
            look_along(&curve(s), &tangent(s))
        })
        .collect()
}

/// Total camera-center path length.
pub fn path_length(poses: &[Pose]) -> f64 {
    poses
        .windows(2)
        .map(|w| (w[1].center() - w[0].center()).norm())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorMapOptions {
    pub channel: Channel,
    /// Gaussian noise added to every map point position.
    pub position_sigma: f64,
    pub rng_seed: u64,
    pub max_range: f64,
}

impl Default for PriorMapOptions {
    fn default() -> Self {
        Self {
            channel: Channel::Learned,
            position_sigma: 0.0,
            rng_seed: 0,
            max_range: 40.0,
        }
    }
}

fn visible(pose: &Pose, k: &CameraIntrinsics, x: &Vector3<f64>, max_range: f64) -> Option<(Vector2<f64>, f64)> {
    let pc = pose.transform_point(x);
    if pc.z < 0.1 || pc.norm() > max_range {
        return None;
    }
    let uv = project(pose, k, x).ok()?;
    k.contains(&uv).then_some((uv, pc.z))
}

/// Ground-truth stand-in for an offline reconstruction: keyframes at the
/// mapping poses observing every visible point with the mapping-session
/// descriptors.
pub fn make_prior_map(
    world: &World,
    mapping_trajectory: &[Pose],
    camera: &CameraIntrinsics,
    noise: &NoiseModel,
    opts: &PriorMapOptions,
) -> Result<VisualMap> {
    if mapping_trajectory.is_empty() {
        return Err(Error::invalid("mapping trajectory is empty"));
    }
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let pixel = Normal::new(0.0, noise.pixel_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let position = Normal::new(0.0, opts.position_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut map = VisualMap::new(opts.channel, world.descriptor_dim);
    let mut observations: Vec<Vec<Observation>> = vec![Vec::new(); world.points.len()];
    for (f, pose) in mapping_trajectory.iter().enumerate() {
        let id = f as u64;
        let mut keypoints = Vec::new();
        for (i, p) in world.points.iter().enumerate() {
            let Some((uv, _)) = visible(pose, camera, &p.position, opts.max_range) else {
                continue;
            };
            if rng.random::<f64>() < noise.detection_dropout {
                continue;
            }
            let mut uv = uv;
            if noise.pixel_sigma > 0.0 {
                uv += Vector2::new(pixel.sample(&mut rng), pixel.sample(&mut rng));
            }
            observations[i].push(Observation {
                keyframe_id: id,
                keypoint_index: keypoints.len(),
            });
            keypoints.push(Keypoint {
                pixel: uv,
                score: 1.0,
                descriptor: p.descriptor(opts.channel).clone(),
                channel: opts.channel,
            });
        }
        map.insert_keyframe(Keyframe {
            id,
            timestamp: f as f64,
            pose: *pose,
            intrinsics: *camera,
            keypoints,
            right_coords: None,
        })?;
    }
    for (i, (p, obs)) in world.points.iter().zip(observations).enumerate() {
        if obs.is_empty() {
            continue;
        }
        let mut dir = Vector3::zeros();
        for o in &obs {
            dir += (p.position - map.keyframes[&o.keyframe_id].pose.center()).normalize();
        }
        let mut x = p.position;
        if opts.position_sigma > 0.0 {
            x += Vector3::new(position.sample(&mut rng), position.sample(&mut rng), position.sample(&mut rng));
        }
        map.insert_point(MapPoint {
            id: i as u64,
            position: x,
            descriptor: p.descriptor(opts.channel).clone(),
            mean_view_dir: dir.try_normalize(1e-12).unwrap_or_else(Vector3::z),
            observations: obs,
            channel: opts.channel,
        })?;
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub camera: CameraIntrinsics,
    pub baseline: f64,
}

const SESSION_STREAM: u64 = u64::MAX;
const DROPOUT_STREAM: u64 = u64::MAX - 1;

/// Lazily renders the frames of one localization session.
#[derive(Clone, Debug)]
pub struct Renderer {
    world: World,
    poses: Vec<Pose>,
    rig: StereoRig,
    noise: NoiseModel,
    fps: f64,
    seed: u64,
    max_range: f64,
    handcrafted: Vec<Descriptor>,
    learned: Vec<Descriptor>,
    dropped: Vec<bool>,
}

impl Renderer {
    pub fn new(
        world: &World,
        trajectory: &[Pose],
        rig: StereoRig,
        appearance: &AppearanceModel,
        noise: &NoiseModel,
        fps: f64,
        seed: u64,
    ) -> Result<Self> {
        appearance.validate()?;
        noise.validate()?;
        if trajectory.is_empty() {
            return Err(Error::invalid("trajectory is empty"));
        }
        if !(fps > 0.0 && rig.baseline > 0.0) {
            return Err(Error::invalid("fps and baseline must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SESSION_STREAM);
        let mut handcrafted = Vec::with_capacity(world.points.len());
        let mut learned = Vec::with_capacity(world.points.len());
        for p in &world.points {
            handcrafted.push(drift_descriptor(&p.handcrafted, appearance.handcrafted_drift, &mut rng));
            learned.push(drift_descriptor(&p.learned, appearance.learned_drift, &mut rng));
        }

        let mut along = vec![0.0];
        for w in trajectory.windows(2) {
            along.push(along.last().unwrap() + (w[1].center() - w[0].center()).norm());
        }
        let total = *along.last().unwrap();
        let n_blocks = ((total / appearance.region_dropout_length).ceil() as usize).max(1);
        let n_drop = (appearance.dropout_learned * n_blocks as f64).round() as usize;
        let mut blocks: Vec<usize> = (0..n_blocks).collect();
        let mut drng = ChaCha8Rng::seed_from_u64(seed);
        drng.set_stream(DROPOUT_STREAM);
        blocks.shuffle(&mut drng);
        let mut is_dropped = vec![false; n_blocks];
        for b in &blocks[..n_drop.min(n_blocks)] {
            is_dropped[*b] = true;
        }
        let dropped = along
            .iter()
            .map(|s| is_dropped[((s / appearance.region_dropout_length) as usize).min(n_blocks - 1)])
            .collect();

        Ok(Self {
            world: world.clone(),
            poses: trajectory.to_vec(),
            rig,
            noise: *noise,
            fps,
            seed,
            max_range: 40.0,
            handcrafted,
            learned,
            dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn rig(&self) -> &StereoRig {
        &self.rig
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        index as f64 / self.fps
    }

    /// True when frame `index` lies in a learned-channel dropout region.
    pub fn in_dropout(&self, index: usize) -> bool {
        self.dropped[index]
    }

    pub fn dropout_fraction(&self) -> f64 {
        self.dropped.iter().filter(|d| **d).count() as f64 / self.dropped.len() as f64
    }

    /// Session descriptor of world point `i`.
    pub fn session_descriptor(&self, i: usize, channel: Channel) -> &Descriptor {
        match channel {
            Channel::Handcrafted => &self.handcrafted[i],
            Channel::Learned => &self.learned[i],
        }
    }

    /// Camera-to-world ground truth.
    pub fn ground_truth(&self) -> Trajectory {
        Trajectory::new(
            self.poses
                .iter()
                .enumerate()
                .map(|(i, p)| (self.timestamp(i), p.inverse()))
                .collect(),
        )
        .expect("increasing timestamps")
    }

    fn frame_rng(&self, index: usize, channel: Channel) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let lane = match channel {
            Channel::Handcrafted => 0,
            Channel::Learned => 1,
        };
        rng.set_stream(2 * index as u64 + lane);
        rng
    }

    /// Keypoints of frame `index` with the world point each one came from
    /// (`None` for outliers), plus right-image columns for the handcrafted
    /// channel.
    pub fn render_keypoints(
        &self,
        index: usize,
        channel: Channel,
    ) -> (Vec<Keypoint>, Vec<Option<f64>>, Vec<Option<usize>>) {
        let pose = &self.poses[index];
        let k = &self.rig.camera;
        let mut rng = self.frame_rng(index, channel);
        let sigma = self.noise.pixel_sigma;
        let gauss = |rng: &mut ChaCha8Rng| -> f64 {
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            } else {
                0.0
            }
        };
        let dropout = channel == Channel::Learned && self.dropped[index];
        let (mut kps, mut right, mut source) = (Vec::new(), Vec::new(), Vec::new());
        for (i, p) in self.world.points.iter().enumerate() {
            let Some((uv, depth)) = visible(pose, k, &p.position, self.max_range) else {
                continue;
            };
            if rng.random::<f64>() < self.noise.detection_dropout {
                continue;
            }
            let outlier = rng.random::<f64>() < self.noise.outlier_rate;
            let mut pixel = uv + Vector2::new(gauss(&mut rng), gauss(&mut rng));
            if outlier {
                pixel = Vector2::new(
                    rng.random_range(0.0..(k.width - 1) as f64),
                    rng.random_range(0.0..(k.height - 1) as f64),
                );
            }
            let ur = uv.x - k.fx * self.rig.baseline / depth + gauss(&mut rng);
            if !k.contains(&pixel) {
                continue;
            }
            let descriptor = if dropout {
                random_unit(&mut rng, self.world.descriptor_dim)
            } else {
                self.session_descriptor(i, channel).clone()
            };
            kps.push(Keypoint {
                pixel,
                score: 1.0,
                descriptor,
                channel,
            });
            right.push((channel == Channel::Handcrafted && ur >= 0.0 && !outlier).then_some(ur));
            source.push((!outlier).then_some(i));
        }
        (kps, right, source)
    }

    /// Learned-channel feature grid: Gaussian score blobs (sigma 1 px) at the
    /// keypoints; each descriptor cell takes the nearest keypoint within one
    /// cell spacing.
    pub fn render_grid(&self, index: usize) -> Result<FeatureGrid> {
        let (kps, _, _) = self.render_keypoints(index, Channel::Learned);
        render_grid(&kps, &self.rig.camera, self.world.descriptor_dim)
    }

    pub fn render_frame(&self, index: usize, learned: LearnedMode) -> Result<FrameInput> {
        if index >= self.len() {
            return Err(Error::invalid(format!("frame {index} out of range")));
        }
        let (keypoints, right_coords, _) = self.render_keypoints(index, Channel::Handcrafted);
        let learned = match learned {
            LearnedMode::None => None,
            LearnedMode::Keypoints => Some(LearnedInput::Keypoints(
                self.render_keypoints(index, Channel::Learned).0,
            )),
            LearnedMode::Grid => Some(LearnedInput::Grid(self.render_grid(index)?)),
        };
        Ok(FrameInput {
            timestamp: self.timestamp(index),
            keypoints,
            right_coords,
            learned,
        })
    }

    /// Frame source view of this renderer.
    pub fn source(&self, learned: LearnedMode) -> RenderedFrames<'_> {
        RenderedFrames {
            renderer: self,
            learned,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnedMode {
    None,
    Keypoints,
    Grid,
}

pub struct RenderedFrames<'a> {
    renderer: &'a Renderer,
    learned: LearnedMode,
}

impl FrameSource for RenderedFrames<'_> {
    fn len(&self) -> usize {
        self.renderer.len()
    }

    fn frame(&self, index: usize) -> Result<FrameInput> {
        self.renderer.render_frame(index, self.learned)
    }
}

pub fn render_grid(keypoints: &[Keypoint], camera: &CameraIntrinsics, dim: usize) -> Result<FeatureGrid> {
    let (h, w) = (camera.height as usize, camera.width as usize);
    let mut grid = FeatureGrid::zeros(h, w, dim)?;
    let mut scores = vec![0.0f64; h * w];
    for kp in keypoints {
        let (u, v) = (kp.pixel.x, kp.pixel.y);
        let c0 = (u - 3.0).floor().max(0.0) as usize;
        let r0 = (v - 3.0).floor().max(0.0) as usize;
        let c1 = ((u + 3.0).ceil() as usize).min(w - 1);
        let r1 = ((v + 3.0).ceil() as usize).min(h - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = (c as f64 - u).powi(2) + (r as f64 - v).powi(2);
                let s = &mut scores[r * w + c];
                *s = s.max((-0.5 * d2).exp());
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            grid.set_score(r, c, scores[r * w + c])?;
        }
    }
    let cell = GRID_RATIO as f64;
    let (rows, cols) = (grid.cell_rows(), grid.cell_cols());
    let mut best: Vec<Option<(f64, usize)>> = vec![None; rows * cols];
    for (i, kp) in keypoints.iter().enumerate() {
        let (gx, gy) = (kp.pixel.x / cell, kp.pixel.y / cell);
        let c0 = (gx - 1.0).floor().max(0.0) as usize;
        let r0 = (gy - 1.0).floor().max(0.0) as usize;
        for r in r0..=((gy + 1.0).ceil() as usize).min(rows - 1) {
            for c in c0..=((gx + 1.0).ceil() as usize).min(cols - 1) {
                let d = ((c as f64 * cell - kp.pixel.x).powi(2) + (r as f64 * cell - kp.pixel.y).powi(2)).sqrt();
                if d <= cell {
                    let slot = &mut best[r * cols + c];
                    if slot.is_none_or(|(bd, _)| d < bd) {
                        *slot = Some((d, i));
                    }
                }
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            if let Some((_, i)) = best[r * cols + c] {
                grid.set_cell(r, c, keypoints[i].descriptor.as_slice())?;
            }
        }
    }
    Ok(grid)
}

/// Renders the whole sequence eagerly.
pub fn render_sequence(
    world: &World,
    trajectory: &[Pose],
    rig: StereoRig,
    appearance: &AppearanceModel,
    noise: &NoiseModel,
    fps: f64,
    seed: u64,
) -> Result<(Vec<FrameInput>, Trajectory)> {
    let r = Renderer::new(world, trajectory, rig, appearance, noise, fps, seed)?;
    let frames = (0..r.len())
        .map(|i| r.render_frame(i, LearnedMode::Keypoints))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, r.ground_truth()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    Line,
    Circle,
    FigureEight,
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(TrajectoryKind::Line),
            "circle" => Ok(TrajectoryKind::Circle),
            "figure8" | "figure-eight" => Ok(TrajectoryKind::FigureEight),
            other => Err(Error::invalid(format!("unknown trajectory '{other}'"))),
        }
    }
}

impl std::fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrajectoryKind::Line => "line",
            TrajectoryKind::Circle => "circle",
            TrajectoryKind::FigureEight => "figure8",
        })
    }
}

/// Full description of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    pub num_frames: usize,
    pub fps: f64,
    /// Figure-eight half sizes, circle radius (first value) or line speed.
    pub path_half_width: f64,
    pub path_half_height: f64,
    pub path_radius: f64,
    pub speed: f64,
    pub num_points: usize,
    pub extent: Vector3<f64>,
    pub clearance: f64,
    pub descriptor_dim: usize,
    pub camera: CameraIntrinsics,
    pub baseline: f64,
    pub appearance: AppearanceModel,
    pub noise: NoiseModel,
    /// Every n-th ground-truth pose becomes a prior keyframe.
    pub prior_stride: usize,
    pub prior_position_sigma: f64,
    pub write_grids: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trajectory: TrajectoryKind::FigureEight,
            num_frames: 1000,
            fps: 20.0,
            path_half_width: 10.0,
            path_half_height: 10.0,
            path_radius: 8.0,
            speed: 1.0,
            num_points: 2000,
            extent: Vector3::new(44.0, 34.0, 8.0),
            clearance: 1.5,
            descriptor_dim: 32,
            camera: CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).expect("valid"),
            baseline: 0.12,
            appearance: AppearanceModel {
                dropout_learned: 0.2,
                ..AppearanceModel::default()
            },
            noise: NoiseModel {
                pixel_sigma: 0.5,
                ..NoiseModel::default()
            },
            prior_stride: 10,
            prior_position_sigma: 0.0,
            write_grids: false,
        }
    }
}

impl SynthConfig {
    pub const REQUIRED_KEYS: [&'static str; 2] = ["trajectory", "num_frames"];

    /// Reads a config from key=value entries on top of the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        for key in Self::REQUIRED_KEYS {
            kv.require(key)?;
        }
        let d = Self::default();
        let vec3 = |key: &str, default: Vector3<f64>| -> Result<Vector3<f64>> {
            match kv.get_vec(key)? {
                None => Ok(default),
                Some(v) if v.len() == 3 => Ok(Vector3::new(v[0], v[1], v[2])),
                Some(_) => Err(Error::invalid(format!("key '{key}' needs 3 values"))),
            }
        };
        let camera = CameraIntrinsics::new(
            kv.get_or("fx", d.camera.fx)?,
            kv.get_or("fy", d.camera.fy)?,
            kv.get_or("cx", d.camera.cx)?,
            kv.get_or("cy", d.camera.cy)?,
            kv.get_or("width", d.camera.width)?,
            kv.get_or("height", d.camera.height)?,
        )?;
        let cfg = Self {
            seed: kv.get_or("seed", d.seed)?,
            trajectory: kv.get_required("trajectory")?,
            num_frames: kv.get_required("num_frames")?,
            fps: kv.get_or("fps", d.fps)?,
            path_half_width: kv.get_or("path_half_width", d.path_half_width)?,
            path_half_height: kv.get_or("path_half_height", d.path_half_height)?,
            path_radius: kv.get_or("path_radius", d.path_radius)?,
            speed: kv.get_or("speed", d.speed)?,
            num_points: kv.get_or("num_points", d.num_points)?,
            extent: vec3("extent", d.extent)?,
            clearance: kv.get_or("clearance", d.clearance)?,
            descriptor_dim: kv.get_or("descriptor_dim", d.descriptor_dim)?,
            camera,
            baseline: kv.get_or("baseline", d.baseline)?,
            appearance: AppearanceModel {
                learned_drift: kv.get_or("learned_drift", d.appearance.learned_drift)?,
                handcrafted_drift: kv.get_or("handcrafted_drift", d.appearance.handcrafted_drift)?,
                dropout_learned: kv.get_or("dropout_learned", d.appearance.dropout_learned)?,
                region_dropout_length: kv.get_or("region_dropout_length", d.appearance.region_dropout_length)?,
            },
            noise: NoiseModel {
                pixel_sigma: kv.get_or("pixel_sigma", d.noise.pixel_sigma)?,
                detection_dropout: kv.get_or("detection_dropout", d.noise.detection_dropout)?,
                outlier_rate: kv.get_or("outlier_rate", d.noise.outlier_rate)?,
            },
            prior_stride: kv.get_or("prior_stride", d.prior_stride)?,
            prior_position_sigma: kv.get_or("prior_position_sigma", d.prior_position_sigma)?,
            write_grids: kv.get_or("write_grids", d.write_grids)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::invalid("num_frames must be >= 2"));
        }
        if !(self.fps > 0.0 && self.baseline > 0.0 && self.clearance >= 0.0 && self.speed > 0.0) {
            return Err(Error::invalid("fps, baseline and speed must be positive"));
        }
        if self.prior_stride < 1 {
            return Err(Error::invalid("prior_stride must be >= 1"));
        }
        self.appearance.validate()?;
        self.noise.validate()?;
        self.world_config().validate()
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            num_points: self.num_points,
            extent: self.extent,
            descriptor_dim: self.descriptor_dim,
            rng_seed: self.seed,
        }
    }

    pub fn trajectory_poses(&self) -> Result<Vec<Pose>> {
        let origin = Vector3::zeros();
        match self.trajectory {
            TrajectoryKind::Line => {
                let len = self.speed * self.num_frames as f64 / self.fps;
                let start = Vector3::new(-0.5 * len, 0.0, 0.0);
                line_trajectory(&start, &Vector3::x(), self.speed, self.fps, self.num_frames)
            }
            TrajectoryKind::Circle => circle_trajectory(&origin, self.path_radius, self.num_frames),
            TrajectoryKind::FigureEight => {
                figure_eight_trajectory(&origin, self.path_half_width, self.path_half_height, self.num_frames)
            }
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        self.validate()?;
        let poses = self.trajectory_poses()?;
        let centers: Vec<Vector3<f64>> = poses.iter().map(Pose::center).collect();
        let world = generate_world(&self.world_config())?.clear_of(&centers, self.clearance);
        if world.points.is_empty() {
            return Err(Error::invalid("no world points left after clearance filtering"));
        }
        let rig = StereoRig {
            camera: self.camera,
            baseline: self.baseline,
        };
        let mapping: Vec<Pose> = poses.iter().step_by(self.prior_stride).copied().collect();
        let prior = make_prior_map(
            &world,
            &mapping,
            &self.camera,
            &NoiseModel::default(),
            &PriorMapOptions {
                channel: Channel::Learned,
                position_sigma: self.prior_position_sigma,
                rng_seed: self.seed ^ 0x5eed,
                ..PriorMapOptions::default()
            },
        )?;
        let renderer = Renderer::new(&world, &poses, rig, &self.appearance, &self.noise, self.fps, self.seed)?;
        Ok(Scenario {
            config: self.clone(),
            world,
            prior,
            renderer,
        })
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("trajectory", self.trajectory);
        kv.set("num_frames", self.num_frames);
        kv.set("fps", self.fps);
        kv.set("path_half_width", self.path_half_width);
        kv.set("path_half_height", self.path_half_height);
        kv.set("path_radius", self.path_radius);
        kv.set("speed", self.speed);
        kv.set("num_points", self.num_points);
        kv.set("extent", format!("{} {} {}", self.extent.x, self.extent.y, self.extent.z));
        kv.set("clearance", self.clearance);
        kv.set("descriptor_dim", self.descriptor_dim);
        kv.set("baseline", self.baseline);
        kv.set("learned_drift", self.appearance.learned_drift);
        kv.set("handcrafted_drift", self.appearance.handcrafted_drift);
        kv.set("dropout_learned", self.appearance.dropout_learned);
        kv.set("region_dropout_length", self.appearance.region_dropout_length);
        kv.set("pixel_sigma", self.noise.pixel_sigma);
        kv.set("detection_dropout", self.noise.detection_dropout);
        kv.set("outlier_rate", self.noise.outlier_rate);
        kv.set("prior_stride", self.prior_stride);
        kv.set("prior_position_sigma", self.prior_position_sigma);
        kv.set("write_grids", self.write_grids);
        kv
    }
}

/// A generated world, its prior map and the localization-session renderer.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: SynthConfig,
    pub world: World,
    pub prior: VisualMap,
    pub renderer: Renderer,
}

impl Scenario {
    pub fn ground_truth(&self) -> Trajectory {
        self.renderer.ground_truth()
    }

    pub fn initial_pose(&self) -> Pose {
        self.renderer.poses()[0]
    }

    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            camera: self.config.camera,
            baseline: self.config.baseline,
            fps: self.config.fps,
            num_frames: self.renderer.len(),
            descriptor_dim: self.config.descriptor_dim,
            initial_pose: self.initial_pose(),
            learned_format: if self.config.write_grids {
                LearnedFormat::Grid
            } else {
                LearnedFormat::Keypoints
            },
        }
    }

    /// Writes the dataset directory layout.
    pub fn write_dataset(&self, dir: &Path) -> Result<()> {
        let frames = dir.join("frames");
        std::fs::create_dir_all(&frames)?;
        let info = self.info();
        let mut cfg = self.config.to_kv();
        cfg.merge(&info.to_kv());
        cfg.save(&dir.join("dataset.cfg"))?;
        self.world.to_map(Channel::Learned).save(&dir.join("world.map"))?;
        self.prior.save(&dir.join("prior.map"))?;
        self.ground_truth().save_tum(&dir.join("gt.tum"))?;
        for i in 0..self.renderer.len() {
            let (kps, right, _) = self.renderer.render_keypoints(i, Channel::Handcrafted);
            write_keypoints_file(&frames.join(format!("{i:06}.kp")), &kps, Some(&right))?;
            match info.learned_format {
                LearnedFormat::Keypoints => {
                    let (lkps, _, _) = self.renderer.render_keypoints(i, Channel::Learned);
                    write_keypoints_file(&frames.join(format!("{i:06}.lkp")), &lkps, None)?;
                }
                LearnedFormat::Grid => {
                    self.renderer.render_grid(i)?.save(&frames.join(format!("{i:06}.grid")))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnedFormat {
    Keypoints,
    Grid,
}

/// Sequence-level metadata stored in `dataset.cfg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetInfo {
    pub camera: CameraIntrinsics,
    pub baseline: f64,
    pub fps: f64,
    pub num_frames: usize,
    pub descriptor_dim: usize,
    /// World-to-camera pose of the first frame.
    pub initial_pose: Pose,
    pub learned_format: LearnedFormat,
}

impl DatasetInfo {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let c = &self.camera;
        kv.set("fx", fmt_f64(c.fx));
        kv.set("fy", fmt_f64(c.fy));
        kv.set("cx", fmt_f64(c.cx));
        kv.set("cy", fmt_f64(c.cy));
        kv.set("width", c.width);
        kv.set("height", c.height);
        kv.set("baseline", fmt_f64(self.baseline));
        kv.set("fps", fmt_f64(self.fps));
        kv.set("num_frames", self.num_frames);
        kv.set("descriptor_dim", self.descriptor_dim);
        let wc = self.initial_pose.inverse();
        let t = wc.translation();
        let q = wc.quaternion();
        let vals: Vec<String> = [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].iter().map(|v| fmt_f64(*v)).collect();
        kv.set("initial_pose", vals.join(" "));
        kv.set(
            "learned_format",
            match self.learned_format {
                LearnedFormat::Keypoints => "keypoints",
                LearnedFormat::Grid => "grid",
            },
        );
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let camera = CameraIntrinsics::new(
            kv.get_required("fx")?,
            kv.get_required("fy")?,
            kv.get_required("cx")?,
            kv.get_required("cy")?,
            kv.get_required("width")?,
            kv.get_required("height")?,
        )?;
        let p = kv
            .get_vec("initial_pose")?
            .ok_or_else(|| Error::invalid("missing required key 'initial_pose'"))?;
        if p.len() != 7 {
            return Err(Error::invalid("initial_pose needs 7 values"));
        }
        let initial_pose = Pose::from_quaternion(Vector3::new(p[0], p[1], p[2]), [p[3], p[4], p[5], p[6]])?.inverse();
        let learned_format = match kv.raw("learned_format").unwrap_or("keypoints") {
            "keypoints" => LearnedFormat::Keypoints,
            "grid" => LearnedFormat::Grid,
            other => return Err(Error::invalid(format!("unknown learned_format '{other}'"))),
        };
        Ok(Self {
            camera,
            baseline: kv.get_required("baseline")?,
            fps: kv.get_required("fps")?,
            num_frames: kv.get_required("num_frames")?,
            descriptor_dim: kv.get_required("descriptor_dim")?,
            initial_pose,
            learned_format,
        })
    }
}

/// Descriptors are stored with single-precision resolution; pixel
/// coordinates round-trip exactly.
pub const DESCRIPTOR_DIGITS: usize = 7;

/// `u v score d0..dD-1 [uR]`, one keypoint per line.
pub fn write_keypoints<W: Write>(
    mut out: W,
    keypoints: &[Keypoint],
    right: Option<&[Option<f64>]>,
) -> Result<()> {
    for (i, kp) in keypoints.iter().enumerate() {
        let mut line = format!("{} {} {}", fmt_f64(kp.pixel.x), fmt_f64(kp.pixel.y), fmt_sig(kp.score, 9));
        for v in kp.descriptor.iter() {
            line.push(' ');
            line.push_str(&fmt_sig(*v, DESCRIPTOR_DIGITS));
        }
        if let Some(Some(ur)) = right.and_then(|r| r.get(i)) {
            line.push(' ');
            line.push_str(&fmt_f64(*ur));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn write_keypoints_file(path: &Path, keypoints: &[Keypoint], right: Option<&[Option<f64>]>) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_keypoints(&mut f, keypoints, right)?;
    f.flush()?;
    Ok(())
}

pub fn read_keypoints<R: BufRead>(
    input: R,
    dim: usize,
    channel: Channel,
) -> Result<(Vec<Keypoint>, Vec<Option<f64>>)> {
    let mut reader = LineReader::new(input);
    let (mut kps, mut right) = (Vec::new(), Vec::new());
    while let Some((line, text)) = reader.next_line()? {
        let v = text
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != 3 + dim && v.len() != 4 + dim {
            return Err(Error::parse(
                line,
                format!("expected {} or {} fields, got {}", 3 + dim, 4 + dim, v.len()),
            ));
        }
        kps.push(Keypoint {
            pixel: Vector2::new(v[0], v[1]),
            score: v[2],
            descriptor: DVector::from_column_slice(&v[3..3 + dim]),
            channel,
        });
        right.push(v.get(3 + dim).copied());
    }
    Ok((kps, right))
}

/// Reads a dataset directory written by [`Scenario::write_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetReader {
    dir: PathBuf,
    pub info: DatasetInfo,
    pub config: KeyValues,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = KeyValues::load(&dir.join("dataset.cfg"))?;
        let info = DatasetInfo::from_kv(&config)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            info,
            config,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ground_truth(&self) -> Result<Trajectory> {
        Trajectory::load_tum(&self.dir.join("gt.tum"))
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        index as f64 / self.info.fps
    }

    fn open_frame(&self, name: String) -> Result<std::io::BufReader<std::fs::File>> {
        Ok(std::io::BufReader::new(std::fs::File::open(self.dir.join("frames").join(name))?))
    }
}

impl FrameSource for DatasetReader {
    fn len(&self) -> usize {
        self.info.num_frames
    }

    fn frame(&self, index: usize) -> Result<FrameInput> {
        let d = self.info.descriptor_dim;
        let (keypoints, right_coords) = read_keypoints(self.open_frame(format!("{index:06}.kp"))?, d, Channel::Handcrafted)?;
        let learned = match self.info.learned_format {
            LearnedFormat::Keypoints => {
                let (k, _) = read_keypoints(self.open_frame(format!("{index:06}.lkp"))?, d, Channel::Learned)?;
                LearnedInput::Keypoints(k)
            }
            LearnedFormat::Grid => LearnedInput::Grid(FeatureGrid::read_from(self.open_frame(format!("{index:06}.grid"))?)?),
        };
        Ok(FrameInput {
            timestamp: self.timestamp(index),
            keypoints,
            right_coords,
            learned: Some(learned),
        })
    }
}

/// Cross-session recall of one channel: fraction of visible, non-outlier
/// keypoints of frame `index` whose projection match against `map` picks
/// their true source point.
pub fn match_recall(
    renderer: &Renderer,
    index: usize,
    channel: Channel,
    map: &VisualMap,
    params: &crate::matching::MatchParams,
) -> Result<f64> {
    let (kps, _, source) = renderer.render_keypoints(index, channel);
    let pose = renderer.poses()[index];
    let m = crate::matching::projection_match_keypoints(&kps, &renderer.rig().camera, map, &pose, params)?;
    let truth: BTreeMap<usize, usize> = source
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.map(|p| (k, p)))
        .filter(|(_, p)| map.points.contains_key(&(*p as u64)))
        .collect();
    if truth.is_empty() {
        return Ok(0.0);
    }
    let correct = m
        .pairs
        .iter()
        .filter(|p| truth.get(&p.keypoint_index) == Some(&(p.point_id as usize)))
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_frames: 40,
            num_points: 300,
            descriptor_dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig {
            num_points: 50,
            extent: Vector3::new(4.0, 5.0, 6.0),
            descriptor_dim: 8,
            rng_seed: 9,
        };
        assert_eq!(generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
        let one = generate_world(&WorldConfig { num_points: 1, ..cfg }).unwrap();
        assert_eq!(one.points.len(), 1);
    }

    #[test]
    fn drift_moves_by_the_requested_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_unit(&mut rng, 16);
        for drift in [0.0, 0.1, 0.5, 1.0] {
            let e = drift_descriptor(&d, drift, &mut rng);
            assert!((e.norm() - 1.0).abs() < 1e-12);
            let angle = d.dot(&e).clamp(-1.0, 1.0).acos();
            assert!((angle - drift * std::f64::consts::FRAC_PI_2).abs() < 1e-7);
        }
    }

    #[test]
    fn trajectories_face_forward() {
        let poses = figure_eight_trajectory(&Vector3::zeros(), 10.0, 10.0, 400).unwrap();
        let steps: Vec<f64> = poses.windows(2).map(|w| (w[1].center() - w[0].center()).norm()).collect();
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        assert!(steps.iter().all(|s| (s - mean).abs() < 1e-3 * mean));
        for w in poses.windows(2) {
            let ahead = w[0].transform_point(&w[1].center());
            assert!(ahead.z > 0.0);
        }
        let line = line_trajectory(&Vector3::zeros(), &Vector3::x(), 1.0, 10.0, 3).unwrap();
        assert!((line[2].center() - Vector3::new(0.2, 0.0, 0.0)).norm() < 1e-12);
        let circle = circle_trajectory(&Vector3::zeros(), 5.0, 8).unwrap();
        assert!((circle[2].center() - Vector3::new(0.0, 5.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn noise_free_prior_map_reprojects_exactly() {
        let cfg = small();
        let poses = cfg.trajectory_poses().unwrap();
        let world = generate_world(&cfg.world_config()).unwrap();
        let map = make_prior_map(&world, &poses[..5], &cfg.camera, &NoiseModel::default(), &PriorMapOptions::default())
            .unwrap();
        map.validate().unwrap();
        for p in map.points.values() {
            for o in &p.observations {
                let kf = &map.keyframes[&o.keyframe_id];
                let uv = project(&kf.pose, &kf.intrinsics, &p.position).unwrap();
                assert_eq!(uv, kf.keypoints[o.keypoint_index].pixel);
            }
        }
    }

    #[test]
    fn noise_free_keypoints_are_exact_projections() {
        let mut cfg = small();
        cfg.noise = NoiseModel::default();
        let sc = cfg.build().unwrap();
        let (kps, right, src) = sc.renderer.render_keypoints(3, Channel::Handcrafted);
        assert!(!kps.is_empty());
        let pose = sc.renderer.poses()[3];
        for ((kp, ur), s) in kps.iter().zip(&right).zip(&src) {
            let x = sc.world.points[s.unwrap()].position;
            assert_eq!(kp.pixel, project(&pose, &cfg.camera, &x).unwrap());
            let z = pose.transform_point(&x).z;
            if let Some(ur) = ur {
                assert!((kp.pixel.x - ur - cfg.camera.fx * cfg.baseline / z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frames_render_identically_in_any_order() {
        let sc = small().build().unwrap();
        let a = sc.renderer.render_frame(7, LearnedMode::Keypoints).unwrap();
        let _ = sc.renderer.render_frame(3, LearnedMode::Keypoints).unwrap();
        let b = sc.renderer.render_frame(7, LearnedMode::Keypoints).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_covers_requested_fraction_of_blocks() {
        let mut cfg = small();
        cfg.num_frames = 400;
        cfg.appearance.dropout_learned = 0.5;
        let sc = cfg.build().unwrap();
        let f = sc.renderer.dropout_fraction();
        assert!(f > 0.3 && f < 0.7, "{f}");
    }

    #[test]
    fn zero_drift_gives_full_recall() {
        let mut cfg = small();
        cfg.noise = NoiseModel::default();
        cfg.appearance = AppearanceModel {
            learned_drift: 0.0,
            handcrafted_drift: 0.0,
            ..AppearanceModel::default()
        };
        let sc = cfg.build().unwrap();
        let recall = match_recall(&sc.renderer, 0, Channel::Learned, &sc.prior, &crate::matching::MatchParams::learned())
            .unwrap();
        assert_eq!(recall, 1.0);
    }

    #[test]
    fn dataset_round_trip() {
        let mut cfg = small();
        cfg.num_frames = 5;
        let sc = cfg.build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        sc.write_dataset(dir.path()).unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        assert_eq!(reader.len(), 5);
        let (dt, dr) = reader.info.initial_pose.distance_to(&sc.initial_pose());
        assert!(dt < 1e-12 && dr < 1e-12);
        for i in 0..5 {
            let a = reader.frame(i).unwrap();
            let b = sc.renderer.render_frame(i, LearnedMode::Keypoints).unwrap();
            assert_eq!(a.keypoints.len(), b.keypoints.len());
            for (x, y) in a.keypoints.iter().zip(&b.keypoints) {
                assert_eq!(x.pixel, y.pixel);
                assert!((&x.descriptor - &y.descriptor).amax() < 1e-6);
            }
            assert_eq!(a.right_coords, b.right_coords);
        }
        assert_eq!(VisualMap::load(&dir.path().join("prior.map")).unwrap().points.len(), sc.prior.points.len());
    }

    #[test]
    fn missing_required_key_is_named() {
        let kv = KeyValues::parse_str("num_frames=10\n").unwrap();
        let err = SynthConfig::from_kv(&kv).unwrap_err().to_string();
        assert!(err.contains("trajectory"), "{err}");
    }
}
