//! Tracking and hierarchical localization.
//!
//! The tracker owns a local handcrafted map and estimates every frame pose by
//! projection matching and pose optimization. Selected keyframes are handed
//! to a background worker that aligns them with the prior map and runs the
//! windowed bundle adjustment; the tracker folds the resulting drift
//! correction back into its map at a keyframe boundary.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::estimation::{
    optimize_pose_with, refine_point_with, stereo_depth_with_min, PointOptions, PoseOptions,
    RobustKernel, SolverConfig, DISPARITY_MIN,
};
use crate::eval::Trajectory;
use crate::features::{default_min_spacing, detect_keypoints, Channel, FeatureGrid, Keypoint};
use crate::geometry::{backproject, se3_exp, se3_log, CameraIntrinsics, Pose, Twist};
use crate::hba::{
    build_window, local_bundle_adjust, BundleResult, PriorAssociation, DEFAULT_FIXED_SIZE,
    DEFAULT_WINDOW_SIZE,
};
use crate::io_util::fmt_sig;
use crate::matching::{iterative_align, projection_match_keypoints, AlignParams, MatchParams, MatchSet};
use crate::worldmap::{update_mean_view_dir, Keyframe, MapPoint, Observation, VisualMap};

/// Learned-channel input of a frame.
#[derive(Clone, Debug, PartialEq)]
pub enum LearnedInput {
    Keypoints(Vec<Keypoint>),
    /// Dense grid; keypoints are detected on demand by the alignment worker.
    Grid(FeatureGrid),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub timestamp: f64,
    /// Handcrafted keypoints of the left image.
    pub keypoints: Vec<Keypoint>,
    /// Matching right-image column per keypoint, when stereo is available.
    pub right_coords: Vec<Option<f64>>,
    pub learned: Option<LearnedInput>,
}

/// Random access to the frames of a sequence.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<FrameInput>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [FrameInput] {
    fn len(&self) -> usize {
        <[FrameInput]>::len(self)
    }

    fn frame(&self, index: usize) -> Result<FrameInput> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("frame {index} out of range")))
    }
}

impl FrameSource for Vec<FrameInput> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, index: usize) -> Result<FrameInput> {
        self.as_slice().frame(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Odometry,
    Hierarchical,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odometry" => Ok(Mode::Odometry),
            "hierarchical" => Ok(Mode::Hierarchical),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// When alignment results are folded into the tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergePolicy {
    /// Wait for the in-flight job at the next keyframe. Reproducible.
    Deterministic,
    /// Merge whenever a result is ready, polled once per frame.
    Realtime,
}

impl std::str::FromStr for MergePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(MergePolicy::Deterministic),
            "realtime" => Ok(MergePolicy::Realtime),
            other => Err(Error::invalid(format!("unknown merge policy '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeRules {
    pub translation: f64,
    pub rotation_deg: f64,
    pub tracked_ratio: f64,
}

impl Default for KeyframeRules {
    fn default() -> Self {
        Self {
            translation: 0.5,
            rotation_deg: 10.0,
            tracked_ratio: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub merge: MergePolicy,
    pub tracking: MatchParams,
    pub min_track_inliers: usize,
    pub pose: PoseOptions,
    pub keyframes: KeyframeRules,
    /// Align every k-th keyframe.
    pub k_align: usize,
    pub window_size: usize,
    pub fixed_size: usize,
    pub max_local_keyframes: usize,
    pub align: AlignParams,
    /// Upper bound for the alignment search radius after repeated failures.
    pub max_align_window: f64,
    /// Prior points are taken from prior keyframes within this distance.
    pub prior_frame_radius: f64,
    pub bundle_kernel: RobustKernel,
    pub bundle_solver: SolverConfig,
    pub disparity_min: f64,
    pub max_depth: f64,
    pub point: PointOptions,
    pub learned_max_keypoints: usize,
    /// Associations kept for reuse in later windows.
    pub max_prior_assocs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hierarchical,
            merge: MergePolicy::Deterministic,
            tracking: MatchParams::handcrafted(),
            min_track_inliers: 15,
            pose: PoseOptions::default(),
            keyframes: KeyframeRules::default(),
            k_align: 3,
            window_size: DEFAULT_WINDOW_SIZE,
            fixed_size: DEFAULT_FIXED_SIZE,
            max_local_keyframes: 20,
            align: AlignParams::default(),
            max_align_window: 60.0,
            prior_frame_radius: 10.0,
            bundle_kernel: RobustKernel::default(),
            bundle_solver: SolverConfig::bundle(),
            disparity_min: DISPARITY_MIN,
            max_depth: 40.0,
            point: PointOptions::default(),
            learned_max_keypoints: 1000,
            max_prior_assocs: 16,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_align < 1 || self.window_size < 1 || self.align.rounds < 1 {
            return Err(Error::invalid("k_align, window_size and align rounds must be >= 1"));
        }
        if self.max_local_keyframes < self.window_size + self.fixed_size {
            return Err(Error::invalid(
                "max_local_keyframes must cover window_size + fixed_size",
            ));
        }
        if self.min_track_inliers < 4 {
            return Err(Error::invalid("min_track_inliers must be >= 4"));
        }
        if !(self.tracking.window_radius > 0.0 && self.align.matching.window_radius > 0.0) {
            return Err(Error::invalid("window radii must be positive"));
        }
        self.pose.solver.validate()?;
        self.bundle_solver.validate()?;
        self.point.solver.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackingStatus {
    Initializing,
    Tracking,
    Lost,
}

impl std::fmt::Display for TrackingStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrackingStatus::Initializing => "initializing",
            TrackingStatus::Tracking => "tracking",
            TrackingStatus::Lost => "lost",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingState {
    pub status: TrackingStatus,
    /// World-to-camera pose of the latest frame.
    pub current_pose: Pose,
    /// Left increment applied per frame interval.
    pub motion_model: Twist,
    pub last_keyframe_id: Option<u64>,
    pub frames_since_alignment: usize,
}

impl TrackingState {
    pub fn new(initial_pose: Pose) -> Self {
        Self {
            status: TrackingStatus::Initializing,
            current_pose: initial_pose,
            motion_model: Twist::zero(),
            last_keyframe_id: None,
            frames_since_alignment: 0,
        }
    }

    pub fn predicted_pose(&self) -> Pose {
        se3_exp(&self.motion_model)
            .map(|d| d.compose(&self.current_pose))
            .unwrap_or(self.current_pose)
    }
}

/// Keyframe test: enough translation or rotation since the last keyframe, or
/// too few of its points still tracked.
pub fn select_keyframe(
    rules: &KeyframeRules,
    last_keyframe_pose: &Pose,
    pose: &Pose,
    tracked: usize,
    reference: usize,
) -> bool {
    let (dt, dr) = pose.distance_to(last_keyframe_pose);
    if dt > rules.translation || dr.to_degrees() > rules.rotation_deg {
        return true;
    }
    reference > 0 && (tracked as f64) < rules.tracked_ratio * reference as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub timestamp: f64,
    pub status: TrackingStatus,
    /// World-to-camera pose reported for the frame.
    pub pose: Pose,
    pub inliers: usize,
    pub keyframe: bool,
    /// Prior matches of a correction merged at this frame.
    pub prior_matches: usize,
    pub tmap_translation_norm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub frames: usize,
    pub keyframes: usize,
    pub lost_frames: usize,
    pub alignments_scheduled: usize,
    pub alignments_replaced: usize,
    pub alignment_failures: usize,
    pub corrections_applied: usize,
    pub stale_discarded: usize,
}

/// Everything an alignment needs, captured by value at a keyframe boundary.
#[derive(Clone, Debug)]
pub struct AlignmentJob {
    pub seq: u64,
    /// Number of corrections the tracker had applied when the snapshot was taken.
    pub epoch: u64,
    pub keyframe_id: u64,
    pub snapshot: VisualMap,
    pub learned: LearnedInput,
    pub prior: Arc<VisualMap>,
    pub assocs: Vec<PriorAssociation>,
    pub align: AlignParams,
    pub prior_frame_radius: f64,
    pub window_size: usize,
    pub fixed_size: usize,
    pub kernel: RobustKernel,
    pub solver: SolverConfig,
    pub learned_max_keypoints: usize,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum AlignmentOutcome {
    Corrected {
        bundle: BundleResult,
        assoc: PriorAssociation,
    },
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct AlignmentResult {
    pub seq: u64,
    pub epoch: u64,
    pub keyframe_id: u64,
    pub outcome: AlignmentOutcome,
}

/// Prior points observed from prior keyframes near `center`. Falls back to
/// the whole map when it has no keyframes.
pub fn prior_submap(prior: &VisualMap, center: &Vector3<f64>, radius: f64) -> VisualMap {
    if prior.keyframes.is_empty() {
        return prior.clone();
    }
    let near: std::collections::BTreeSet<u64> = prior
        .keyframes
        .values()
        .filter(|kf| (kf.pose.center() - center).norm() <= radius)
        .map(|kf| kf.id)
        .collect();
    let mut sub = VisualMap::new(prior.channel, prior.descriptor_dim);
    for p in prior.points.values() {
        if p.observations.iter().any(|o| near.contains(&o.keyframe_id)) {
            sub.points.insert(p.id, p.clone());
        }
    }
    sub
}

/// Default alignment: learned detection, iterated prior matching, then the
/// windowed bundle adjustment on the snapshot.
pub fn run_alignment_job(job: AlignmentJob) -> AlignmentResult {
    let outcome = align_snapshot(&job).unwrap_or_else(|e| AlignmentOutcome::Failed(e.to_string()));
    AlignmentResult {
        seq: job.seq,
        epoch: job.epoch,
        keyframe_id: job.keyframe_id,
        outcome,
    }
}

fn align_snapshot(job: &AlignmentJob) -> Result<AlignmentOutcome> {
    let kf = job
        .snapshot
        .keyframes
        .get(&job.keyframe_id)
        .ok_or_else(|| Error::Integrity(format!("keyframe {} not in snapshot", job.keyframe_id)))?;
    let keypoints = match &job.learned {
        LearnedInput::Keypoints(k) => k.clone(),
        LearnedInput::Grid(g) => {
            let spacing = default_min_spacing(g.height(), g.width(), job.learned_max_keypoints);
            detect_keypoints(g, job.learned_max_keypoints, spacing)?
        }
    };
    let frame = Keyframe {
        id: kf.id,
        timestamp: kf.timestamp,
        pose: kf.pose,
        intrinsics: kf.intrinsics,
        keypoints,
        right_coords: None,
    };
    let nearby = prior_submap(&job.prior, &kf.pose.center(), job.prior_frame_radius);
    let aligned = iterative_align(&frame, &nearby, &kf.pose, &job.align)?;
    let assoc = PriorAssociation {
        keyframe_id: kf.id,
        keypoints: frame.keypoints,
        matches: aligned.matches,
    };
    let mut window = build_window(&job.snapshot, job.window_size, job.fixed_size);
    window.prior_assocs = job
        .assocs
        .iter()
        .filter(|a| a.keyframe_id != kf.id && window.flexible.contains(&a.keyframe_id))
        .cloned()
        .collect();
    window.prior_assocs.push(assoc.clone());
    let bundle = local_bundle_adjust(&window, &job.snapshot, &job.prior, job.kernel, &job.solver)?;
    if !bundle.report.final_cost.is_finite() {
        return Err(Error::IllConditioned("bundle adjustment diverged".into()));
    }
    Ok(AlignmentOutcome::Corrected { bundle, assoc })
}

pub type Executor = Arc<dyn Fn(AlignmentJob) -> AlignmentResult + Send + Sync>;

#[derive(Default)]
struct Slot {
    queued: Option<AlignmentJob>,
    shutdown: bool,
}

struct Shared {
    slot: Mutex<Slot>,
    wake: Condvar,
}

/// Single background thread with a one-element job slot. Submitting while a
/// job is queued replaces it; the running job is never interrupted.
pub struct AlignmentWorker {
    shared: Arc<Shared>,
    results: Receiver<AlignmentResult>,
    handle: Option<JoinHandle<()>>,
    outstanding: usize,
}

impl AlignmentWorker {
    pub fn new() -> Self {
        Self::with_executor(Arc::new(run_alignment_job))
    }

    pub fn with_executor(executor: Executor) -> Self {
        let shared = Arc::new(Shared {
            slot: Mutex::new(Slot::default()),
            wake: Condvar::new(),
        });
        let (tx, rx) = mpsc::channel();
        let worker_shared = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("hiloc-align".into())
            .spawn(move || worker_loop(&worker_shared, &executor, &tx))
            .expect("spawn alignment worker");
        Self {
            shared,
            results: rx,
            handle: Some(handle),
            outstanding: 0,
        }
    }

    /// Queues `job`. Returns true when it replaced a job that had not started.
    pub fn submit(&mut self, job: AlignmentJob) -> bool {
        let mut slot = self.shared.slot.lock().expect("slot poisoned");
        let replaced = slot.queued.replace(job).is_some();
        drop(slot);
        self.shared.wake.notify_one();
        if !replaced {
            self.outstanding += 1;
        }
        replaced
    }

    /// Jobs submitted whose results have not been received.
    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    pub fn try_result(&mut self) -> Option<AlignmentResult> {
        match self.results.try_recv() {
            Ok(r) => {
                self.outstanding -= 1;
                Some(r)
            }
            Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => None,
        }
    }

    /// Blocks until the next result, or returns `None` when nothing is pending.
    pub fn wait_result(&mut self) -> Option<AlignmentResult> {
        if self.outstanding == 0 {
            return None;
        }
        let r = self.results.recv().ok()?;
        self.outstanding -= 1;
        Some(r)
    }
}

impl Default for AlignmentWorker {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for AlignmentWorker {
    fn drop(&mut self) {
        if let Ok(mut slot) = self.shared.slot.lock() {
            slot.shutdown = true;
            slot.queued = None;
        }
        self.shared.wake.notify_all();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn worker_loop(shared: &Shared, executor: &Executor, tx: &Sender<AlignmentResult>) {
    loop {
        let job = {
            let mut slot = shared.slot.lock().expect("slot poisoned");
            loop {
                if slot.shutdown {
                    return;
                }
                if let Some(job) = slot.queued.take() {
                    break job;
                }
                slot = shared.wake.wait(slot).expect("slot poisoned");
            }
        };
        if tx.send(executor(job)).is_err() {
            return;
        }
    }
}

pub struct Tracker {
    cfg: PipelineConfig,
    camera: CameraIntrinsics,
    baseline: f64,
    state: TrackingState,
    local_map: VisualMap,
    prior: Option<Arc<VisualMap>>,
    worker: Option<AlignmentWorker>,
    last_timestamp: Option<f64>,
    /// Map observations of the last keyframe, the tracked-ratio reference.
    last_keyframe_points: usize,
    keyframe_count: usize,
    assocs: VecDeque<PriorAssociation>,
    epoch: u64,
    next_seq: u64,
    align_failures_in_row: u32,
    stats: RunStats,
    /// Merged-correction info for the report of the current frame.
    merged: Option<(usize, f64)>,
}

impl Tracker {
    /// `prior` is ignored in odometry mode.
    pub fn new(
        cfg: PipelineConfig,
        camera: CameraIntrinsics,
        baseline: f64,
        initial_pose: Pose,
        prior: Option<Arc<VisualMap>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if !(baseline > 0.0) {
            return Err(Error::invalid("stereo baseline must be positive"));
        }
        let prior = match cfg.mode {
            Mode::Odometry => None,
            Mode::Hierarchical => prior,
        };
        Self::with_worker(cfg, camera, baseline, initial_pose, prior, None)
    }

    /// Like [`Tracker::new`] with a custom alignment executor.
    pub fn with_worker(
        cfg: PipelineConfig,
        camera: CameraIntrinsics,
        baseline: f64,
        initial_pose: Pose,
        prior: Option<Arc<VisualMap>>,
        executor: Option<Executor>,
    ) -> Result<Self> {
        cfg.validate()?;
        let worker = prior.as_ref().map(|_| match executor {
            Some(e) => AlignmentWorker::with_executor(e),
            None => AlignmentWorker::new(),
        });
        Ok(Self {
            cfg,
            camera,
            baseline,
            state: TrackingState::new(initial_pose),
            local_map: VisualMap::new(Channel::Handcrafted, 0),
            prior,
            worker,
            last_timestamp: None,
            last_keyframe_points: 0,
            keyframe_count: 0,
            assocs: VecDeque::new(),
            epoch: 0,
            next_seq: 0,
            align_failures_in_row: 0,
            stats: RunStats::default(),
            merged: None,
        })
    }

    pub fn state(&self) -> &TrackingState {
        &self.state
    }

    pub fn local_map(&self) -> &VisualMap {
        &self.local_map
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn process_frame(&mut self, input: &FrameInput) -> Result<FrameReport> {
        if let Some(last) = self.last_timestamp {
            if !(input.timestamp > last) {
                return Err(Error::invalid(format!(
                    "timestamp {} not after {last}",
                    input.timestamp
                )));
            }
        }
        if !input.right_coords.is_empty() && input.right_coords.len() != input.keypoints.len() {
            return Err(Error::invalid("right_coords length differs from keypoints"));
        }
        self.last_timestamp = Some(input.timestamp);
        self.stats.frames += 1;
        self.merged = None;
        if self.cfg.merge == MergePolicy::Realtime {
            while let Some(r) = self.worker.as_mut().and_then(AlignmentWorker::try_result) {
                self.merge(r);
            }
        }

        let report = match self.state.status {
            TrackingStatus::Initializing | TrackingStatus::Lost => self.initialize(input)?,
            TrackingStatus::Tracking => self.track(input)?,
        };
        self.state.frames_since_alignment += 1;
        if report.status == TrackingStatus::Lost {
            self.stats.lost_frames += 1;
        }
        Ok(report)
    }

    /// Starts (or restarts) the map from a stereo frame at the current best pose.
    fn initialize(&mut self, input: &FrameInput) -> Result<FrameReport> {
        let pose = match self.state.status {
            TrackingStatus::Initializing => self.state.current_pose,
            _ => self.state.predicted_pose(),
        };
        let created = self.stereo_points(input, &pose, &[]).len();
        if created < self.cfg.min_track_inliers {
            self.state.current_pose = pose;
            if self.state.status == TrackingStatus::Tracking {
                self.state.status = TrackingStatus::Lost;
            }
            return Ok(self.report(input, TrackingStatus::Lost, 0, false));
        }
        self.state.current_pose = pose;
        self.insert_keyframe(input, &MatchSet::empty(Channel::Handcrafted), &[])?;
        self.state.status = TrackingStatus::Tracking;
        let status = self.state.status;
        self.after_keyframe(input);
        Ok(self.report(input, status, created, true))
    }

    fn track(&mut self, input: &FrameInput) -> Result<FrameReport> {
        let predicted = self.state.predicted_pose();
        let mut matches = projection_match_keypoints(
            &input.keypoints,
            &self.camera,
            &self.local_map,
            &predicted,
            &self.cfg.tracking,
        )?;
        if matches.len() < self.cfg.min_track_inliers {
            let wide = MatchParams {
                window_radius: 2.0 * self.cfg.tracking.window_radius,
                ..self.cfg.tracking
            };
            matches = projection_match_keypoints(&input.keypoints, &self.camera, &self.local_map, &predicted, &wide)?;
        }
        let corr = matches.correspondences(&self.local_map, &input.keypoints);
        let estimate = if matches.len() >= self.cfg.min_track_inliers {
            optimize_pose_with(&corr, &self.camera, &predicted, &self.cfg.pose).ok()
        } else {
            None
        };
        let Some(est) = estimate.filter(|e| e.inlier_count() >= self.cfg.min_track_inliers) else {
            self.state.status = TrackingStatus::Lost;
            self.state.current_pose = predicted;
            let inliers = 0;
            return Ok(self.report(input, TrackingStatus::Lost, inliers, false));
        };

        let increment = est.pose.compose(&self.state.current_pose.inverse());
        if let Ok(xi) = se3_log(&increment) {
            self.state.motion_model = xi;
        }
        self.state.current_pose = est.pose;
        let inliers = est.inlier_count();
        let inlier_matches = MatchSet {
            pairs: matches
                .pairs
                .iter()
                .zip(&est.inliers)
                .filter(|(_, f)| **f)
                .map(|(m, _)| *m)
                .collect(),
            source_channel: Channel::Handcrafted,
        };

        let last_kf_pose = self
            .state
            .last_keyframe_id
            .and_then(|id| self.local_map.keyframes.get(&id))
            .map(|kf| kf.pose);
        let is_kf = match last_kf_pose {
            Some(p) => select_keyframe(
                &self.cfg.keyframes,
                &p,
                &est.pose,
                inliers,
                self.last_keyframe_points,
            ),
            None => true,
        };
        if is_kf {
            let matched: Vec<usize> = matches.pairs.iter().map(|m| m.keypoint_index).collect();
            self.insert_keyframe(input, &inlier_matches, &matched)?;
            self.after_keyframe(input);
        }
        Ok(self.report(input, TrackingStatus::Tracking, inliers, is_kf))
    }

    fn report(&self, input: &FrameInput, status: TrackingStatus, inliers: usize, keyframe: bool) -> FrameReport {
        let (prior_matches, tmap) = self.merged.unwrap_or((0, 0.0));
        FrameReport {
            timestamp: input.timestamp,
            status,
            pose: self.state.current_pose,
            inliers,
            keyframe,
            prior_matches,
            tmap_translation_norm: tmap,
        }
    }

    /// New world points from stereo depth for keypoints not in `skip`.
    fn stereo_points(&self, input: &FrameInput, pose: &Pose, skip: &[usize]) -> Vec<(usize, Vector3<f64>)> {
        let to_world = pose.inverse();
        let mut out = Vec::new();
        for (i, kp) in input.keypoints.iter().enumerate() {
            if skip.contains(&i) {
                continue;
            }
            let Some(Some(ur)) = input.right_coords.get(i) else { continue };
            let Ok(depth) = stereo_depth_with_min(self.camera.fx, self.baseline, kp.pixel.x, *ur, self.cfg.disparity_min)
            else {
                continue;
            };
            if depth > self.cfg.max_depth {
                continue;
            }
            let pc = backproject(&self.camera, &kp.pixel, depth);
            out.push((i, to_world.transform_point(&pc)));
        }
        out
    }

    fn insert_keyframe(&mut self, input: &FrameInput, inliers: &MatchSet, matched: &[usize]) -> Result<()> {
        let pose = self.state.current_pose;
        let id = self.local_map.next_keyframe_id();
        if self.local_map.descriptor_dim == 0 {
            if let Some(kp) = input.keypoints.first() {
                self.local_map.descriptor_dim = kp.descriptor.len();
            }
        }
        let right = if input.right_coords.is_empty() {
            None
        } else {
            Some(input.right_coords.clone())
        };
        self.local_map.insert_keyframe(Keyframe {
            id,
            timestamp: input.timestamp,
            pose,
            intrinsics: self.camera,
            keypoints: input.keypoints.clone(),
            right_coords: right,
        })?;

        let mut sorted_matched = matched.to_vec();
        sorted_matched.sort_unstable();
        let fresh = self.stereo_points(input, &pose, &sorted_matched);
        let center = pose.center();
        for (next_id, (idx, x)) in (self.local_map.next_point_id()..).zip(&fresh) {
            let kp = &input.keypoints[*idx];
            let dir = (x - center).try_normalize(1e-12).unwrap_or_else(Vector3::z);
            self.local_map.insert_point(MapPoint {
                id: next_id,
                position: *x,
                descriptor: kp.descriptor.clone(),
                mean_view_dir: dir,
                observations: vec![Observation {
                    keyframe_id: id,
                    keypoint_index: *idx,
                }],
                channel: Channel::Handcrafted,
            })?;
        }

        for m in &inliers.pairs {
            self.local_map.add_observation(
                m.point_id,
                Observation {
                    keyframe_id: id,
                    keypoint_index: m.keypoint_index,
                },
            )?;
            self.refine_map_point(m.point_id);
        }
        self.last_keyframe_points = inliers.len() + fresh.len();
        self.state.last_keyframe_id = Some(id);
        self.keyframe_count += 1;
        self.stats.keyframes += 1;

        while self.local_map.keyframes.len() > self.cfg.max_local_keyframes {
            let oldest = *self.local_map.keyframes.keys().next().expect("non-empty");
            self.local_map.remove_keyframe(oldest);
        }
        Ok(())
    }

    fn refine_map_point(&mut self, id: u64) {
        let Some(point) = self.local_map.points.get(&id) else { return };
        let obs: Vec<(Pose, Vector2<f64>)> = point
            .observations
            .iter()
            .filter_map(|o| {
                let kf = self.local_map.keyframes.get(&o.keyframe_id)?;
                Some((kf.pose, kf.keypoints.get(o.keypoint_index)?.pixel))
            })
            .collect();
        let refined = refine_point_with(&obs, &self.camera, &point.position, &self.cfg.point)
            .ok()
            .filter(|e| e.position.iter().all(|v| v.is_finite()));
        let mut updated = match update_mean_view_dir(point, &self.local_map) {
            Ok((p, _)) => p,
            Err(_) => return,
        };
        if let Some(r) = refined {
            if obs.iter().all(|(pose, _)| pose.transform_point(&r.position).z > 0.0) {
                updated.position = r.position;
            }
        }
        self.local_map.points.insert(id, updated);
    }

    /// Keyframe boundary: merge pending corrections, then maybe schedule.
    fn after_keyframe(&mut self, input: &FrameInput) {
        if self.worker.is_none() {
            return;
        }
        if self.cfg.merge == MergePolicy::Deterministic {
            while let Some(r) = self.worker.as_mut().and_then(AlignmentWorker::wait_result) {
                self.merge(r);
            }
        }
        if self.keyframe_count.is_multiple_of(self.cfg.k_align) {
            self.schedule_current_keyframe(input.learned.clone());
        }
    }

    fn schedule_current_keyframe(&mut self, learned: Option<LearnedInput>) {
        let (Some(kf_id), Some(learned)) = (self.state.last_keyframe_id, learned) else {
            return;
        };
        let Some(prior) = self.prior.clone() else { return };
        let mut align = self.cfg.align;
        let grow = 2f64.powi(self.align_failures_in_row.min(8) as i32);
        align.matching.window_radius = (align.matching.window_radius * grow).min(self.cfg.max_align_window);
        let job = AlignmentJob {
            seq: self.next_seq,
            epoch: self.epoch,
            keyframe_id: kf_id,
            snapshot: self.local_map.clone(),
            learned,
            prior,
            assocs: self.assocs.iter().cloned().collect(),
            align,
            prior_frame_radius: self.cfg.prior_frame_radius,
            window_size: self.cfg.window_size,
            fixed_size: self.cfg.fixed_size,
            kernel: self.cfg.bundle_kernel,
            solver: self.cfg.bundle_solver,
            learned_max_keypoints: self.cfg.learned_max_keypoints,
        };
        self.next_seq += 1;
        self.stats.alignments_scheduled += 1;
        if let Some(w) = self.worker.as_mut() {
            if w.submit(job) {
                self.stats.alignments_replaced += 1;
            }
        }
    }

    fn merge(&mut self, result: AlignmentResult) {
        if result.epoch != self.epoch {
            self.stats.stale_discarded += 1;
            return;
        }
        match result.outcome {
            AlignmentOutcome::Failed(_) => {
                self.stats.alignment_failures += 1;
                self.align_failures_in_row += 1;
            }
            AlignmentOutcome::Corrected { bundle, assoc } => {
                self.align_failures_in_row = 0;
                bundle.write_back(&mut self.local_map);
                let t = bundle.t_map;
                self.local_map.apply_rigid_correction_all(&t);
                self.state.current_pose = self.state.current_pose.compose(&t);
                self.epoch += 1;
                self.stats.corrections_applied += 1;
                self.state.frames_since_alignment = 0;
                let n = assoc.matches.len();
                self.assocs.retain(|a| a.keyframe_id != assoc.keyframe_id);
                self.assocs.push_back(assoc);
                while self.assocs.len() > self.cfg.max_prior_assocs {
                    self.assocs.pop_front();
                }
                let live: Vec<u64> = self.local_map.keyframes.keys().copied().collect();
                self.assocs.retain(|a| live.contains(&a.keyframe_id));
                self.merged = Some((n, t.translation().norm()));
            }
        }
    }
}

/// Result of replaying a whole sequence.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub reports: Vec<FrameReport>,
    pub stats: RunStats,
}

/// Replays `source` through a fresh tracker.
pub fn run_sequence(
    source: &dyn FrameSource,
    camera: CameraIntrinsics,
    baseline: f64,
    initial_pose: Pose,
    prior: Option<Arc<VisualMap>>,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    let mut tracker = Tracker::new(*cfg, camera, baseline, initial_pose, prior)?;
    let mut reports = Vec::with_capacity(source.len());
    let mut trajectory = Trajectory::default();
    for i in 0..source.len() {
        let frame = source.frame(i)?;
        let r = tracker.process_frame(&frame)?;
        trajectory.push(r.timestamp, r.pose.inverse())?;
        reports.push(r);
    }
    Ok(RunOutput {
        trajectory,
        reports,
        stats: *tracker.stats(),
    })
}

/// Per-frame CSV: `timestamp,status,inliers,prior_matches,tmap_translation_norm`.
pub fn write_status_csv<W: Write>(reports: &[FrameReport], mut out: W) -> Result<()> {
    writeln!(out, "timestamp,status,inliers,prior_matches,tmap_translation_norm")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_sig(r.timestamp, 9),
            r.status,
            r.inliers,
            r.prior_matches,
            fmt_sig(r.tmap_translation_norm, 9)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{LearnedMode, NoiseModel, SynthConfig, TrajectoryKind};

    fn clean_line(frames: usize) -> crate::synth::Scenario {
        SynthConfig {
            trajectory: TrajectoryKind::Line,
            num_frames: frames,
            num_points: 1500,
            descriptor_dim: 16,
            noise: NoiseModel::default(),
            ..SynthConfig::default()
        }
        .build()
        .unwrap()
    }

    fn odometry() -> PipelineConfig {
        PipelineConfig {
            mode: Mode::Odometry,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn keyframe_rules() {
        let rules = KeyframeRules::default();
        let p = Pose::identity();
        assert!(!select_keyframe(&rules, &p, &p, 100, 100));
        let moved = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 0.6)).unwrap();
        assert!(select_keyframe(&rules, &p, &moved, 100, 100));
        let turned = se3_exp(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.2, 0.0)).unwrap();
        assert!(select_keyframe(&rules, &p, &turned, 100, 100));
        assert!(select_keyframe(&rules, &p, &p, 59, 100));
        assert!(!select_keyframe(&rules, &p, &p, 60, 100));
    }

    #[test]
    fn stationary_camera_stays_put() {
        let sc = clean_line(2);
        let frame = sc.renderer.render_frame(0, LearnedMode::None).unwrap();
        let mut t = Tracker::new(odometry(), sc.config.camera, sc.config.baseline, sc.initial_pose(), None).unwrap();
        for i in 0..20 {
            let f = FrameInput {
                timestamp: i as f64,
                ..frame.clone()
            };
            let r = t.process_frame(&f).unwrap();
            let (dt, dr) = r.pose.distance_to(&sc.initial_pose());
            assert!(dt < 1e-9 && dr < 1e-9, "frame {i}: {dt} {dr}");
        }
        assert_eq!(t.stats().keyframes, 1);
    }

    #[test]
    fn noise_free_odometry_is_exact() {
        let sc = clean_line(100);
        let src = sc.renderer.source(LearnedMode::None);
        let out = run_sequence(&src, sc.config.camera, sc.config.baseline, sc.initial_pose(), None, &odometry()).unwrap();
        assert_eq!(out.stats.lost_frames, 0);
        for (r, gt) in out.reports.iter().zip(sc.renderer.poses()) {
            let (dt, dr) = r.pose.distance_to(gt);
            assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
        }
    }

    #[test]
    fn empty_frames_are_lost_and_dead_reckoned() {
        let sc = clean_line(4);
        let mut t = Tracker::new(odometry(), sc.config.camera, sc.config.baseline, sc.initial_pose(), None).unwrap();
        for i in 0..3 {
            t.process_frame(&sc.renderer.render_frame(i, LearnedMode::None).unwrap()).unwrap();
        }
        let before = t.state().current_pose;
        let expected = t.state().predicted_pose();
        let empty = FrameInput {
            timestamp: 10.0,
            keypoints: Vec::new(),
            right_coords: Vec::new(),
            learned: None,
        };
        let r = t.process_frame(&empty).unwrap();
        assert_eq!(r.status, TrackingStatus::Lost);
        assert_eq!(r.pose, expected);
        assert_ne!(r.pose, before);
        assert!(t.process_frame(&FrameInput { timestamp: 9.0, ..empty }).is_err());
    }

    #[test]
    fn prior_is_ignored_in_odometry_mode() {
        let sc = clean_line(40);
        let src = sc.renderer.source(LearnedMode::Keypoints);
        let k = sc.config.camera;
        let a = run_sequence(&src, k, sc.config.baseline, sc.initial_pose(), None, &odometry()).unwrap();
        let b = run_sequence(&src, k, sc.config.baseline, sc.initial_pose(), Some(Arc::new(sc.prior.clone())), &odometry())
            .unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(b.stats.alignments_scheduled, 0);
    }

    fn dummy_job(seq: u64) -> AlignmentJob {
        AlignmentJob {
            seq,
            epoch: 0,
            keyframe_id: 0,
            snapshot: VisualMap::new(Channel::Handcrafted, 4),
            learned: LearnedInput::Keypoints(Vec::new()),
            prior: Arc::new(VisualMap::new(Channel::Learned, 4)),
            assocs: Vec::new(),
            align: AlignParams::default(),
            prior_frame_radius: 10.0,
            window_size: 8,
            fixed_size: 2,
            kernel: RobustKernel::default(),
            solver: SolverConfig::bundle(),
            learned_max_keypoints: 10,
        }
    }

    #[test]
    fn queued_job_is_replaced_by_newer_one() {
        let (started_tx, started_rx) = mpsc::channel::<u64>();
        let gate = Arc::new((Mutex::new(false), Condvar::new()));
        let g = Arc::clone(&gate);
        let started_tx = Mutex::new(started_tx);
        let exec: Executor = Arc::new(move |job: AlignmentJob| {
            started_tx.lock().unwrap().send(job.seq).unwrap();
            let (m, c) = &*g;
            let mut open = m.lock().unwrap();
            while !*open {
                open = c.wait(open).unwrap();
            }
            AlignmentResult {
                seq: job.seq,
                epoch: job.epoch,
                keyframe_id: job.keyframe_id,
                outcome: AlignmentOutcome::Failed("gated".into()),
            }
        });
        let mut w = AlignmentWorker::with_executor(exec);
        assert!(!w.submit(dummy_job(0)));
        assert_eq!(started_rx.recv().unwrap(), 0);
        assert!(!w.submit(dummy_job(1)));
        assert!(w.submit(dummy_job(2)));
        assert!(w.submit(dummy_job(3)));
        assert_eq!(w.outstanding(), 2);
        {
            let (m, c) = &*gate;
            *m.lock().unwrap() = true;
            c.notify_all();
        }
        let seqs: Vec<u64> = std::iter::from_fn(|| w.wait_result()).map(|r| r.seq).collect();
        assert_eq!(seqs, vec![0, 3]);
        assert!(w.try_result().is_none());
    }

    #[test]
    fn stale_results_change_nothing() {
        let sc = clean_line(60);
        let src = sc.renderer.source(LearnedMode::Keypoints);
        let k = sc.config.camera;
        let cfg = PipelineConfig::default();
        let base = run_sequence(&src, k, sc.config.baseline, sc.initial_pose(), None, &cfg).unwrap();

        let exec: Executor = Arc::new(|job: AlignmentJob| AlignmentResult {
            seq: job.seq,
            epoch: job.epoch + 1,
            keyframe_id: job.keyframe_id,
            outcome: AlignmentOutcome::Failed("from another epoch".into()),
        });
        let prior = Some(Arc::new(sc.prior.clone()));
        let mut t = Tracker::with_worker(cfg, k, sc.config.baseline, sc.initial_pose(), prior, Some(exec)).unwrap();
        for (i, r) in base.reports.iter().enumerate() {
            let got = t.process_frame(&src.frame(i).unwrap()).unwrap();
            assert_eq!(got.pose, r.pose);
        }
        let stats = t.stats();
        assert!(stats.alignments_scheduled > 0);
        assert_eq!(stats.stale_discarded, stats.alignments_scheduled - stats.alignments_replaced - t.worker.as_ref().unwrap().outstanding());
        assert_eq!(stats.alignment_failures, 0);
        assert_eq!(stats.corrections_applied, 0);
    }

    #[test]
    fn status_csv_header() {
        let mut buf = Vec::new();
        write_status_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "timestamp,status,inliers,prior_matches,tmap_translation_norm\n");
    }
}
