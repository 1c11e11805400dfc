//! Benchmark fixtures built from one synthetic figure-eight run.

use std::sync::Arc;

use hiloc::features::{Channel, FeatureGrid, Keypoint};
use hiloc::hba::{build_window, LocalWindow, PriorAssociation};
use hiloc::matching::{iterative_align, AlignParams};
use hiloc::pipeline::{prior_submap, FrameInput, Mode, PipelineConfig, Tracker};
use hiloc::synth::{LearnedMode, Scenario, SynthConfig};
use hiloc::{Keyframe, Pose, VisualMap};

pub struct Fixture {
    pub scenario: Scenario,
    pub frames: Vec<FrameInput>,
    /// Tracker state after `warmup` frames.
    pub tracker_map: VisualMap,
    pub pose: Pose,
    /// The frame right after the warmup.
    pub next: FrameInput,
    pub grid: FeatureGrid,
    pub learned: Vec<Keypoint>,
    pub window: LocalWindow,
    pub prior: Arc<VisualMap>,
}

impl Fixture {
    pub fn new(warmup: usize) -> Self {
        let scenario = SynthConfig::default().build().expect("scenario");
        let frames: Vec<FrameInput> = (0..warmup + 20)
            .map(|i| scenario.renderer.render_frame(i, LearnedMode::None).expect("frame"))
            .collect();
        let cfg = PipelineConfig {
            mode: Mode::Odometry,
            ..PipelineConfig::default()
        };
        let c = &scenario.config;
        let mut tracker = Tracker::new(cfg, c.camera, c.baseline, scenario.initial_pose(), None).expect("tracker");
        for f in &frames[..warmup] {
            tracker.process_frame(f).expect("track");
        }
        let tracker_map = tracker.local_map().clone();
        let pose = tracker.state().current_pose;

        let last = tracker_map.keyframes.values().last().expect("keyframe");
        let index = warmup - 1;
        let (learned, _, _) = scenario.renderer.render_keypoints(index, Channel::Learned);
        let grid = scenario.renderer.render_grid(index).expect("grid");
        let prior = Arc::new(scenario.prior.clone());
        let mut window = build_window(&tracker_map, 8, 2);
        let frame = Keyframe {
            keypoints: learned.clone(),
            right_coords: None,
            ..last.clone()
        };
        let nearby = prior_submap(&prior, &last.pose.center(), 10.0);
        if let Ok(a) = iterative_align(&frame, &nearby, &last.pose, &AlignParams::default()) {
            window.prior_assocs.push(PriorAssociation {
                keyframe_id: last.id,
                keypoints: learned.clone(),
                matches: a.matches,
            });
        }
        Self {
            next: frames[warmup].clone(),
            scenario,
            frames,
            tracker_map,
            pose,
            grid,
            learned,
            window,
            prior,
        }
    }
}
