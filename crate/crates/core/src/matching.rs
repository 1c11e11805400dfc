//! Projection matching of a frame against a map, and the iterated
//! match / optimize / match alignment used against the prior map.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::estimation::{optimize_pose_with, PoseOptions};
use crate::features::{best_descriptor_match, Channel, Keypoint, DEFAULT_MAX_DESCRIPTOR_DISTANCE, DEFAULT_RATIO};
use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::worldmap::{visible_candidates, Keyframe, ViewFilter, VisualMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    pub point_id: u64,
    pub keypoint_index: usize,
    pub distance: f64,
    /// Observed minus projected pixel.
    pub residual: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    /// Sorted by map-point id.
    pub pairs: Vec<MatchPair>,
    pub source_channel: Channel,
}

impl MatchSet {
    pub fn empty(channel: Channel) -> Self {
        Self {
            pairs: Vec::new(),
            source_channel: channel,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(world point, observed pixel)` pairs for pose optimization.
    pub fn correspondences(
        &self,
        map: &VisualMap,
        keypoints: &[Keypoint],
    ) -> Vec<(Vector3<f64>, Vector2<f64>)> {
        self.pairs
            .iter()
            .filter_map(|m| {
                let p = map.points.get(&m.point_id)?;
                let kp = keypoints.get(m.keypoint_index)?;
                Some((p.position, kp.pixel))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    /// Search radius around the projected pixel.
    pub window_radius: f64,
    pub max_distance: f64,
    pub ratio: f64,
    pub view: ViewFilter,
}

impl MatchParams {
    /// Frame-to-frame tracking on the handcrafted channel.
    pub fn handcrafted() -> Self {
        Self {
            window_radius: 7.0,
            max_distance: DEFAULT_MAX_DESCRIPTOR_DISTANCE,
            ratio: DEFAULT_RATIO,
            view: ViewFilter::default(),
        }
    }

    /// Keyframe to prior-map alignment on the learned channel.
    pub fn learned() -> Self {
        Self {
            window_radius: 15.0,
            ..Self::handcrafted()
        }
    }
}

/// Uniform bucket grid over keypoint pixels.
struct KeypointIndex {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl KeypointIndex {
    fn new(keypoints: &[Keypoint], width: u32, height: u32, cell: f64) -> Self {
        let cols = (f64::from(width) / cell).ceil().max(1.0) as usize;
        let rows = (f64::from(height) / cell).ceil().max(1.0) as usize;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, kp) in keypoints.iter().enumerate() {
            let c = ((kp.pixel.x / cell).floor().max(0.0) as usize).min(cols - 1);
            let r = ((kp.pixel.y / cell).floor().max(0.0) as usize).min(rows - 1);
            buckets[r * cols + c].push(i);
        }
        Self {
            cell,
            cols,
            rows,
            buckets,
        }
    }

    /// Indices of keypoints within `radius` of `center`, ascending.
    fn within(&self, keypoints: &[Keypoint], center: &Vector2<f64>, radius: f64) -> Vec<usize> {
        let bucket = |v: f64, n: usize| ((v / self.cell).floor().max(0.0) as usize).min(n - 1);
        let c0 = bucket(center.x - radius, self.cols);
        let c1 = bucket(center.x + radius, self.cols);
        let r0 = bucket(center.y - radius, self.rows);
        let r1 = bucket(center.y + radius, self.rows);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.extend(
                    self.buckets[r * self.cols + c]
                        .iter()
                        .copied()
                        .filter(|&i| (keypoints[i].pixel - center).norm_squared() <= r2),
                );
            }
        }
        out.sort_unstable();
        out
    }
}

/// Projects the visible map points with `pose_estimate` and matches each one
/// to the best keypoint inside its search window. Conflicts over a keypoint
/// keep the smaller descriptor distance, ties going to the smaller point id.
pub fn projection_match(
    frame: &Keyframe,
    map: &VisualMap,
    pose_estimate: &Pose,
    params: &MatchParams,
) -> Result<MatchSet> {
    projection_match_keypoints(&frame.keypoints, &frame.intrinsics, map, pose_estimate, params)
}

/// [`projection_match`] over a bare keypoint list.
pub fn projection_match_keypoints(
    keypoints: &[Keypoint],
    k: &CameraIntrinsics,
    map: &VisualMap,
    pose_estimate: &Pose,
    params: &MatchParams,
) -> Result<MatchSet> {
    if !(params.window_radius > 0.0) {
        return Err(Error::invalid("window_radius must be positive"));
    }
    let candidates = visible_candidates(map, pose_estimate, k, &params.view);
    if candidates.is_empty() || keypoints.is_empty() {
        return Ok(MatchSet::empty(map.channel));
    }
    let index = KeypointIndex::new(keypoints, k.width, k.height, params.window_radius.max(4.0));

    // keypoint index -> best claim
    let mut claims: BTreeMap<usize, MatchPair> = BTreeMap::new();
    for point in candidates {
        let Ok(uv) = project(pose_estimate, k, &point.position) else {
            continue;
        };
        let nearby = index.within(keypoints, &uv, params.window_radius);
        let best = best_descriptor_match(
            &point.descriptor,
            nearby.iter().map(|&i| (i, &keypoints[i].descriptor)),
            params.max_distance,
            params.ratio,
        )?;
        let Some(best) = best else { continue };
        let pair = MatchPair {
            point_id: point.id,
            keypoint_index: best.index,
            distance: best.distance,
            residual: keypoints[best.index].pixel - uv,
        };
        claims
            .entry(best.index)
            .and_modify(|cur| {
                if (pair.distance, pair.point_id) < (cur.distance, cur.point_id) {
                    *cur = pair;
                }
            })
            .or_insert(pair);
    }
    let mut pairs: Vec<MatchPair> = claims.into_values().collect();
    pairs.sort_by_key(|p| p.point_id);
    Ok(MatchSet {
        pairs,
        source_channel: map.channel,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignParams {
    pub rounds: usize,
    pub matching: MatchParams,
    /// Lower bound for the shrinking search radius.
    pub min_window_radius: f64,
    pub min_prior_matches: usize,
    pub pose: PoseOptions,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            rounds: 2,
            matching: MatchParams::learned(),
            min_window_radius: 4.0,
            min_prior_matches: 10,
            pose: PoseOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub pose: Pose,
    /// Inlier matches from the last round, residuals at the final pose.
    pub matches: MatchSet,
    /// Raw match count of each round.
    pub round_counts: Vec<usize>,
}

/// Alternates projection matching and pose optimization against `prior`,
/// halving the search radius after each round.
pub fn iterative_align(
    frame: &Keyframe,
    prior: &VisualMap,
    initial_pose: &Pose,
    params: &AlignParams,
) -> Result<Alignment> {
    if params.rounds < 1 {
        return Err(Error::invalid("rounds must be >= 1"));
    }
    let mut pose = *initial_pose;
    let mut radius = params.matching.window_radius;
    let mut round_counts = Vec::with_capacity(params.rounds);
    let mut last = MatchSet::empty(prior.channel);
    for _ in 0..params.rounds {
        let mp = MatchParams {
            window_radius: radius,
            ..params.matching
        };
        let matches = projection_match(frame, prior, &pose, &mp)?;
        round_counts.push(matches.len());
        if matches.len() < params.min_prior_matches.max(4) {
            return Err(Error::AlignmentFailed {
                matches: matches.len(),
                required: params.min_prior_matches,
            });
        }
        let corr = matches.correspondences(prior, &frame.keypoints);
        let est = optimize_pose_with(&corr, &frame.intrinsics, &pose, &params.pose)?;
        pose = est.pose;
        let pairs = matches
            .pairs
            .iter()
            .zip(&est.inliers)
            .filter(|(_, inlier)| **inlier)
            .filter_map(|(m, _)| {
                let x = prior.points.get(&m.point_id)?.position;
                let uv = project(&pose, &frame.intrinsics, &x).ok()?;
                Some(MatchPair {
                    residual: frame.keypoints[m.keypoint_index].pixel - uv,
                    ..*m
                })
            })
            .collect();
        last = MatchSet {
            pairs,
            source_channel: prior.channel,
        };
        radius = (radius * 0.5).max(params.min_window_radius);
    }
    if last.len() < params.min_prior_matches {
        return Err(Error::AlignmentFailed {
            matches: last.len(),
            required: params.min_prior_matches,
        });
    }
    Ok(Alignment {
        pose,
        matches: last,
        round_counts,
    })
}
