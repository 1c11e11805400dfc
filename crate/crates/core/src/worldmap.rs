//! Keyframe and map-point storage for both the prior map and the local map.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::features::{Channel, Descriptor, Keypoint};
use crate::geometry::{project_camera_point, CameraIntrinsics, Pose, Z_MIN};
use crate::io_util::{fmt_f64, parse_f64, parse_u64, LineReader};

const MAP_MAGIC: &str = "HILOC-MAP v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub keyframe_id: u64,
    pub keypoint_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: Descriptor,
    /// Unit vector, mean of the camera-to-point directions of all observers.
    pub mean_view_dir: Vector3<f64>,
    pub observations: Vec<Observation>,
    pub channel: Channel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub timestamp: f64,
    /// World-to-camera.
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<Keypoint>,
    /// Right-image column per keypoint, for stereo frames.
    pub right_coords: Option<Vec<Option<f64>>>,
}

impl Keyframe {
    pub fn right_coord(&self, index: usize) -> Option<f64> {
        self.right_coords
            .as_ref()
            .and_then(|r| r.get(index).copied().flatten())
    }
}

/// Thresholds for [`visible_candidates`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewFilter {
    pub max_view_angle: f64,
    pub max_distance: f64,
}

impl Default for ViewFilter {
    fn default() -> Self {
        Self {
            max_view_angle: 60f64.to_radians(),
            max_distance: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualMap {
    pub channel: Channel,
    pub descriptor_dim: usize,
    pub points: BTreeMap<u64, MapPoint>,
    pub keyframes: BTreeMap<u64, Keyframe>,
}

impl VisualMap {
    pub fn new(channel: Channel, descriptor_dim: usize) -> Self {
        Self {
            channel,
            descriptor_dim,
            points: BTreeMap::new(),
            keyframes: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.keyframes.is_empty()
    }

    pub fn next_point_id(&self) -> u64 {
        self.points.keys().next_back().map_or(0, |id| id + 1)
    }

    pub fn next_keyframe_id(&self) -> u64 {
        self.keyframes.keys().next_back().map_or(0, |id| id + 1)
    }

    pub fn insert_keyframe(&mut self, kf: Keyframe) -> Result<()> {
        if self.keyframes.contains_key(&kf.id) {
            return Err(Error::Integrity(format!("duplicate keyframe id {}", kf.id)));
        }
        if let Some(r) = &kf.right_coords {
            if r.len() != kf.keypoints.len() {
                return Err(Error::Integrity("right_coords length mismatch".into()));
            }
        }
        self.keyframes.insert(kf.id, kf);
        Ok(())
    }

    /// Inserts a point after checking that its observations resolve.
    pub fn insert_point(&mut self, point: MapPoint) -> Result<()> {
        if self.points.contains_key(&point.id) {
            return Err(Error::Integrity(format!("duplicate map point id {}", point.id)));
        }
        for obs in &point.observations {
            self.check_observation(point.id, obs)?;
        }
        self.points.insert(point.id, point);
        Ok(())
    }

    pub fn add_observation(&mut self, point_id: u64, obs: Observation) -> Result<()> {
        self.check_observation(point_id, &obs)?;
        let p = self
            .points
            .get_mut(&point_id)
            .ok_or_else(|| Error::Integrity(format!("unknown map point {point_id}")))?;
        if !p.observations.contains(&obs) {
            p.observations.push(obs);
        }
        Ok(())
    }

    fn check_observation(&self, point_id: u64, obs: &Observation) -> Result<()> {
        let kf = self.keyframes.get(&obs.keyframe_id).ok_or_else(|| {
            Error::Integrity(format!(
                "point {point_id} observed by missing keyframe {}",
                obs.keyframe_id
            ))
        })?;
        if obs.keypoint_index >= kf.keypoints.len() {
            return Err(Error::Integrity(format!(
                "point {point_id} references keypoint {} of keyframe {} ({} keypoints)",
                obs.keypoint_index,
                obs.keyframe_id,
                kf.keypoints.len()
            )));
        }
        Ok(())
    }

    /// Removes a keyframe, its observations, and any point left unobserved.
    pub fn remove_keyframe(&mut self, id: u64) -> Option<Keyframe> {
        let kf = self.keyframes.remove(&id)?;
        self.points.retain(|_, p| {
            p.observations.retain(|o| o.keyframe_id != id);
            !p.observations.is_empty()
        });
        Some(kf)
    }

    /// Referential-integrity sweep.
    pub fn validate(&self) -> Result<()> {
        for (id, kf) in &self.keyframes {
            if *id != kf.id {
                return Err(Error::Integrity(format!("keyframe key {id} != id {}", kf.id)));
            }
            if let Some(r) = &kf.right_coords {
                if r.len() != kf.keypoints.len() {
                    return Err(Error::Integrity("right_coords length mismatch".into()));
                }
            }
        }
        for (id, p) in &self.points {
            if *id != p.id {
                return Err(Error::Integrity(format!("point key {id} != id {}", p.id)));
            }
            for obs in &p.observations {
                self.check_observation(p.id, obs)?;
            }
        }
        Ok(())
    }

    /// Re-expresses the listed keyframes and points in a new world frame:
    /// poses become `T * correction`, points become `correction^-1 * X`.
    pub fn apply_rigid_correction<'a>(
        &mut self,
        correction: &Pose,
        keyframe_ids: impl IntoIterator<Item = &'a u64>,
        point_ids: impl IntoIterator<Item = &'a u64>,
    ) {
        let inv = correction.inverse();
        for id in keyframe_ids {
            if let Some(kf) = self.keyframes.get_mut(id) {
                kf.pose = kf.pose.compose(correction);
            }
        }
        for id in point_ids {
            if let Some(p) = self.points.get_mut(id) {
                p.position = inv.transform_point(&p.position);
                p.mean_view_dir = inv.rotate_vector(&p.mean_view_dir);
            }
        }
    }

    /// Applies [`VisualMap::apply_rigid_correction`] to every keyframe and point.
    pub fn apply_rigid_correction_all(&mut self, correction: &Pose) {
        let kfs: Vec<u64> = self.keyframes.keys().copied().collect();
        let pts: Vec<u64> = self.points.keys().copied().collect();
        self.apply_rigid_correction(correction, &kfs, &pts);
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{MAP_MAGIC}")?;
        writeln!(out, "CHANNEL {}", self.channel)?;
        writeln!(out, "DIM {}", self.descriptor_dim)?;
        for kf in self.keyframes.values() {
            let c2w = kf.pose.inverse();
            let t = c2w.translation();
            let q = c2w.quaternion();
            let k = &kf.intrinsics;
            let fields = [
                fmt_f64(kf.timestamp),
                fmt_f64(t.x),
                fmt_f64(t.y),
                fmt_f64(t.z),
                fmt_f64(q[0]),
                fmt_f64(q[1]),
                fmt_f64(q[2]),
                fmt_f64(q[3]),
                fmt_f64(k.fx),
                fmt_f64(k.fy),
                fmt_f64(k.cx),
                fmt_f64(k.cy),
            ];
            writeln!(out, "KF {} {} {} {}", kf.id, fields.join(" "), k.width, k.height)?;
            for (idx, kp) in kf.keypoints.iter().enumerate() {
                write!(
                    out,
                    "KP {} {} {} {} {}",
                    kf.id,
                    idx,
                    fmt_f64(kp.pixel.x),
                    fmt_f64(kp.pixel.y),
                    fmt_f64(kp.score)
                )?;
                for d in kp.descriptor.iter() {
                    write!(out, " {}", fmt_f64(*d))?;
                }
                if let Some(ur) = kf.right_coord(idx) {
                    write!(out, " {}", fmt_f64(ur))?;
                }
                writeln!(out)?;
            }
        }
        for p in self.points.values() {
            write!(out, "MP {}", p.id)?;
            for v in p.position.iter().chain(p.mean_view_dir.iter()) {
                write!(out, " {}", fmt_f64(*v))?;
            }
            for d in p.descriptor.iter() {
                write!(out, " {}", fmt_f64(*d))?;
            }
            writeln!(out, " {}", p.channel)?;
        }
        for p in self.points.values() {
            for o in &p.observations {
                writeln!(out, "OBS {} {} {}", p.id, o.keyframe_id, o.keypoint_index)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = LineReader::new(input);
        let (n, magic) = lines.next_line()?.ok_or_else(|| Error::parse(1, "empty map file"))?;
        if magic != MAP_MAGIC {
            return Err(Error::parse(n, format!("expected '{MAP_MAGIC}'")));
        }
        let mut channel = Channel::Handcrafted;
        let mut dim: Option<usize> = None;
        let mut map: Option<VisualMap> = None;
        let mut pending_obs: Vec<(usize, u64, Observation)> = Vec::new();

        while let Some((n, line)) = lines.next_line()? {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "CHANNEL" if map.is_none() => {
                    let v = toks.get(1).ok_or_else(|| Error::parse(n, "missing channel"))?;
                    channel = v.parse().map_err(|e: Error| Error::parse(n, e.to_string()))?;
                }
                "DIM" if map.is_none() => {
                    let v = toks.get(1).ok_or_else(|| Error::parse(n, "missing dim"))?;
                    dim = Some(parse_u64(v, n)? as usize);
                }
                "KF" | "KP" | "MP" | "OBS" => {
                    let m = match map.as_mut() {
                        Some(m) => m,
                        None => {
                            let d = dim.ok_or_else(|| Error::parse(n, "DIM must precede records"))?;
                            map.insert(VisualMap::new(channel, d))
                        }
                    };
                    match toks[0] {
                        "KF" => parse_kf(m, &toks, n)?,
                        "KP" => parse_kp(m, &toks, n)?,
                        "MP" => parse_mp(m, &toks, n)?,
                        _ => {
                            if toks.len() != 4 {
                                return Err(Error::parse(n, "OBS expects 3 fields"));
                            }
                            let obs = Observation {
                                keyframe_id: parse_u64(toks[2], n)?,
                                keypoint_index: parse_u64(toks[3], n)? as usize,
                            };
                            pending_obs.push((n, parse_u64(toks[1], n)?, obs));
                        }
                    }
                }
                other => return Err(Error::parse(n, format!("unknown record '{other}'"))),
            }
        }
        let mut map = match map {
            Some(m) => m,
            None => VisualMap::new(channel, dim.unwrap_or(0)),
        };
        for kf in map.keyframes.values_mut() {
            if kf
                .right_coords
                .as_ref()
                .is_some_and(|r| r.iter().all(Option::is_none))
            {
                kf.right_coords = None;
            }
        }
        for (n, point_id, obs) in pending_obs {
            if !map.points.contains_key(&point_id) {
                return Err(Error::Integrity(format!(
                    "line {n}: observation of unknown map point {point_id}"
                )));
            }
            map.add_observation(point_id, obs)
                .map_err(|e| Error::Integrity(format!("line {n}: {e}")))?;
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(file)
    }
}

pub fn save_map(map: &VisualMap, path: &Path) -> Result<()> {
    map.save(path)
}

pub fn load_map(path: &Path) -> Result<VisualMap> {
    VisualMap::load(path)
}

fn floats(toks: &[&str], n: usize) -> Result<Vec<f64>> {
    toks.iter().map(|t| parse_f64(t, n)).collect()
}

fn parse_kf(map: &mut VisualMap, toks: &[&str], n: usize) -> Result<()> {
    if toks.len() != 16 {
        return Err(Error::parse(n, "KF expects 15 fields"));
    }
    let id = parse_u64(toks[1], n)?;
    let v = floats(&toks[2..14], n)?;
    let width = parse_u64(toks[14], n)? as u32;
    let height = parse_u64(toks[15], n)? as u32;
    let c2w = Pose::from_quaternion(Vector3::new(v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]])
        .map_err(|e| Error::parse(n, e.to_string()))?;
    let intrinsics = CameraIntrinsics::new(v[8], v[9], v[10], v[11], width, height)
        .map_err(|e| Error::parse(n, e.to_string()))?;
    map.insert_keyframe(Keyframe {
        id,
        timestamp: v[0],
        pose: c2w.inverse(),
        intrinsics,
        keypoints: Vec::new(),
        right_coords: Some(Vec::new()),
    })
    .map_err(|e| Error::parse(n, e.to_string()))
}

fn parse_kp(map: &mut VisualMap, toks: &[&str], n: usize) -> Result<()> {
    let d = map.descriptor_dim;
    let has_right = match toks.len() {
        l if l == 6 + d => false,
        l if l == 7 + d => true,
        _ => return Err(Error::parse(n, format!("KP expects {} or {} fields", 5 + d, 6 + d))),
    };
    let kf_id = parse_u64(toks[1], n)?;
    let idx = parse_u64(toks[2], n)? as usize;
    let channel = map.channel;
    let kf = map
        .keyframes
        .get_mut(&kf_id)
        .ok_or_else(|| Error::parse(n, format!("KP for unknown keyframe {kf_id}")))?;
    if idx != kf.keypoints.len() {
        return Err(Error::parse(n, format!("KP index {idx} out of sequence")));
    }
    let v = floats(&toks[3..], n)?;
    kf.keypoints.push(Keypoint {
        pixel: Vector2::new(v[0], v[1]),
        score: v[2],
        descriptor: DVector::from_column_slice(&v[3..3 + d]),
        channel,
    });
    let right = if has_right { Some(v[3 + d]) } else { None };
    kf.right_coords.get_or_insert_with(Vec::new).push(right);
    Ok(())
}

fn parse_mp(map: &mut VisualMap, toks: &[&str], n: usize) -> Result<()> {
    let d = map.descriptor_dim;
    if toks.len() != 9 + d {
        return Err(Error::parse(n, format!("MP expects {} fields", 8 + d)));
    }
    let id = parse_u64(toks[1], n)?;
    let v = floats(&toks[2..8 + d], n)?;
    let channel: Channel = toks[8 + d]
        .parse()
        .map_err(|e: Error| Error::parse(n, e.to_string()))?;
    map.insert_point(MapPoint {
        id,
        position: Vector3::new(v[0], v[1], v[2]),
        mean_view_dir: Vector3::new(v[3], v[4], v[5]),
        descriptor: DVector::from_column_slice(&v[6..6 + d]),
        observations: Vec::new(),
        channel,
    })
    .map_err(|e| Error::parse(n, e.to_string()))
}

/// Points that project in front of the camera and inside the image, are seen
/// within `max_view_angle` of their mean viewing direction, and lie within
/// `max_distance` of the camera center. Ordered by point id.
pub fn visible_candidates<'a>(
    map: &'a VisualMap,
    predicted_pose: &Pose,
    k: &CameraIntrinsics,
    filter: &ViewFilter,
) -> Vec<&'a MapPoint> {
    let center = predicted_pose.center();
    let cos_max = filter.max_view_angle.cos();
    map.points
        .values()
        .filter(|p| {
            let pc = predicted_pose.transform_point(&p.position);
            if !(pc.z > Z_MIN) {
                return false;
            }
            match project_camera_point(k, &pc) {
                Ok(uv) if k.contains(&uv) => {}
                _ => return false,
            }
            let ray = p.position - center;
            let dist = ray.norm();
            if dist > filter.max_distance || dist == 0.0 {
                return false;
            }
            p.mean_view_dir.dot(&ray) / dist >= cos_max
        })
        .collect()
}

/// Recomputes the mean viewing direction. Returns the updated point and a
/// flag that is set when the mean was degenerate and the old value was kept.
pub fn update_mean_view_dir(point: &MapPoint, map: &VisualMap) -> Result<(MapPoint, bool)> {
    if point.observations.is_empty() {
        return Err(Error::invalid(format!("point {} has no observations", point.id)));
    }
    let mut sum = Vector3::zeros();
    for obs in &point.observations {
        let kf = map.keyframes.get(&obs.keyframe_id).ok_or_else(|| {
            Error::Integrity(format!("missing keyframe {}", obs.keyframe_id))
        })?;
        let ray = point.position - kf.pose.center();
        let n = ray.norm();
        if n > 0.0 {
            sum += ray / n;
        }
    }
    let mut out = point.clone();
    let n = sum.norm();
    if n > 1e-12 {
        out.mean_view_dir = sum / n;
        Ok((out, false))
    } else {
        Ok((out, true))
    }
}
