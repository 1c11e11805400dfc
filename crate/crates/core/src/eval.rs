//! Trajectory evaluation: timestamp association, rigid alignment, ATE and RPE.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io_util::{fmt_sig, parse_f64, LineReader};

pub const DEFAULT_MAX_DT: f64 = 0.02;
pub const TUM_DIGITS: usize = 9;

/// Time-ordered camera-to-world poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid(format!(
                    "timestamps not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<()> {
        if let Some((last, _)) = self.samples.last() {
            if !(timestamp > *last) {
                return Err(Error::invalid(format!(
                    "timestamp {timestamp} not after {last}"
                )));
            }
        }
        self.samples.push((timestamp, pose));
        Ok(())
    }

    /// Applies `g * T` to every sample.
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        Trajectory {
            samples: self.samples.iter().map(|(t, p)| (*t, g.compose(p))).collect(),
        }
    }

    /// TUM format: `timestamp tx ty tz qx qy qz qw`.
    pub fn write_tum<W: Write>(&self, mut out: W) -> Result<()> {
        for (t, pose) in &self.samples {
            let p = pose.translation();
            let q = pose.quaternion();
            let fields = [*t, p.x, p.y, p.z, q[0], q[1], q[2], q[3]];
            let line: Vec<String> = fields.iter().map(|v| fmt_sig(*v, TUM_DIGITS)).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_tum<R: BufRead>(input: R) -> Result<Self> {
        let mut reader = LineReader::new(input);
        let mut samples = Vec::new();
        while let Some((line, text)) = reader.next_line()? {
            let toks: Vec<&str> = text.split_whitespace().collect();
            if toks.len() != 8 {
                return Err(Error::parse(line, format!("expected 8 fields, got {}", toks.len())));
            }
            let v = toks
                .iter()
                .map(|t| parse_f64(t, line))
                .collect::<Result<Vec<f64>>>()?;
            let pose = Pose::from_quaternion(Vector3::new(v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]])
                .map_err(|e| Error::parse(line, e.to_string()))?;
            samples.push((v[0], pose));
        }
        Self::new(samples)
    }

    pub fn save_tum(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tum(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_tum(path: &Path) -> Result<Self> {
        Self::read_tum(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Pairs each estimate with the nearest ground-truth timestamp, closest
/// pairs first, each sample used at most once. Returns `(est, gt)` index
/// pairs ordered by estimate index.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::NoOverlap);
    }
    let gt_times: Vec<f64> = gt.samples.iter().map(|s| s.0).collect();
    let mut candidates = Vec::new();
    for (i, (t, _)) in est.samples.iter().enumerate() {
        let lo = gt_times.partition_point(|g| *g < t - max_dt);
        for (j, g) in gt_times.iter().enumerate().skip(lo) {
            if *g > t + max_dt {
                break;
            }
            candidates.push(((g - t).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_est = vec![false; est.len()];
    let mut used_gt = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_est[i] && !used_gt[j] {
            used_est[i] = true;
            used_gt[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    pairs.sort_unstable();
    Ok(pairs)
}

fn collinear(scatter: &Matrix3<f64>) -> bool {
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    !(ev[1] > 1e-12 * ev[0].max(1e-300))
}

/// Rigid transform `T` minimizing `sum |gt_i - T est_i|^2` over
/// `(est_i, gt_i)` position pairs, without scale.
pub fn umeyama_align(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Pose> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} position pairs, need 3",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let mu_g = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let (mut scatter_e, mut scatter_g) = (Matrix3::zeros(), Matrix3::zeros());
    for (e, g) in pairs {
        let (de, dg) = (e - mu_e, g - mu_g);
        cov += dg * de.transpose();
        scatter_e += de * de.transpose();
        scatter_g += dg * dg.transpose();
    }
    if collinear(&scatter_e) || collinear(&scatter_g) {
        return Err(Error::DegenerateConfiguration(
            "positions are collinear".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let t = mu_g - r * mu_e;
    Pose::new(r, t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    /// Per associated pair, in estimate order.
    pub errors: Vec<f64>,
    /// Maps the estimate onto the ground truth.
    pub alignment: Pose,
}

pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<AteResult> {
    ate_with(est, gt, DEFAULT_MAX_DT)
}

pub fn ate_with(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<AteResult> {
    let idx = associate(est, gt, max_dt)?;
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = idx
        .iter()
        .map(|&(i, j)| (*est.samples[i].1.translation(), *gt.samples[j].1.translation()))
        .collect();
    let alignment = umeyama_align(&pairs)?;
    let errors: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| (g - alignment.transform_point(e)).norm())
        .collect();
    Ok(AteResult {
        rmse: rms(&errors),
        errors,
        alignment,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpeResult {
    pub rmse: f64,
    pub errors: Vec<f64>,
}

/// Translational RMSE of `(gt_i^-1 gt_{i+d})^-1 (est_i^-1 est_{i+d})` over
/// associated samples `d` apart.
pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<RpeResult> {
    rpe_with(est, gt, delta, DEFAULT_MAX_DT)
}

pub fn rpe_with(est: &Trajectory, gt: &Trajectory, delta: usize, max_dt: f64) -> Result<RpeResult> {
    if delta < 1 {
        return Err(Error::invalid("rpe delta must be >= 1"));
    }
    let idx = associate(est, gt, max_dt)?;
    if idx.len() < delta + 1 {
        return Err(Error::InsufficientData {
            needed: delta + 1,
            got: idx.len(),
        });
    }
    let errors: Vec<f64> = idx
        .windows(delta + 1)
        .map(|w| {
            let (a, b) = (w[0], w[delta]);
            let rel_gt = gt.samples[a.1].1.inverse().compose(&gt.samples[b.1].1);
            let rel_est = est.samples[a.0].1.inverse().compose(&est.samples[b.0].1);
            rel_gt.inverse().compose(&rel_est).translation().norm()
        })
        .collect();
    Ok(RpeResult {
        rmse: rms(&errors),
        errors,
    })
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub samples: usize,
}

impl Metric {
    pub fn new(name: &str, value: f64, unit: &str, samples: usize) -> Self {
        Self {
            name: name.into(),
            value,
            unit: unit.into(),
            samples,
        }
    }
}

/// CSV with header `metric,value,unit,samples`.
pub fn write_metrics<W: Write>(metrics: &[Metric], mut out: W) -> Result<()> {
    writeln!(out, "metric,value,unit,samples")?;
    for m in metrics {
        writeln!(out, "{},{},{},{}", m.name, fmt_sig(m.value, TUM_DIGITS), m.unit, m.samples)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};

    fn traj(points: &[[f64; 3]]) -> Trajectory {
        Trajectory::new(
            points
                .iter()
                .enumerate()
                .map(|(i, p)| (i as f64 * 0.1, Pose::from_translation(Vector3::from(*p))))
                .collect(),
        )
        .unwrap()
    }

    fn wiggle(n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let s = i as f64 * 0.3;
                    let xi = Twist::new(s.cos() * 3.0, s.sin() * 2.0, 0.4 * (2.0 * s).sin(), 0.1 * s, 0.2, -0.05 * s);
                    (i as f64 * 0.05, se3_exp(&xi).unwrap())
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn timestamps_must_increase() {
        let p = Pose::identity();
        assert!(Trajectory::new(vec![(1.0, p), (1.0, p)]).is_err());
    }

    #[test]
    fn identical_timestamps_pair_fully() {
        let t = wiggle(10);
        let pairs = associate(&t, &t, DEFAULT_MAX_DT).unwrap();
        assert_eq!(pairs, (0..10).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn disjoint_ranges_do_not_overlap() {
        let a = traj(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = Trajectory::new(vec![(10.0, Pose::identity())]).unwrap();
        assert!(matches!(associate(&a, &b, 0.02), Err(Error::NoOverlap)));
    }

    #[test]
    fn identity_and_self_error() {
        let t = wiggle(30);
        let r = ate(&t, &t).unwrap();
        assert!(r.rmse < 1e-12);
        let (dt, dr) = r.alignment.distance_to(&Pose::identity());
        assert!(dt < 1e-9 && dr < 1e-9);
        assert!(rpe(&t, &t, 1).unwrap().rmse < 1e-12);
    }

    #[test]
    fn recovers_known_alignment() {
        let gt = wiggle(40);
        let g = se3_exp(&Twist::new(1.0, -2.0, 0.5, 0.3, -0.2, 0.9)).unwrap();
        let est = gt.transformed(&g.inverse());
        let r = ate(&est, &gt).unwrap();
        let (dt, dr) = r.alignment.distance_to(&g);
        assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
        assert!(r.rmse < 1e-9);
        assert!(rpe(&est, &gt, 1).unwrap().rmse < 1e-9);
    }

    #[test]
    fn square_with_saddle_offsets() {
        // Offsets follow sign(x*y), which no rigid motion can absorb.
        let gt = traj(&[[1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0], [1.0, -1.0, 0.0]]);
        let est = traj(&[[1.0, 1.0, 0.1], [-1.0, 1.0, -0.1], [-1.0, -1.0, 0.1], [1.0, -1.0, -0.1]]);
        let r = ate(&est, &gt).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-12, "{}", r.rmse);
    }

    #[test]
    fn corrupted_pose_rpe() {
        let gt = traj(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let est = traj(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.5, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let r = rpe(&est, &gt, 1).unwrap();
        assert_eq!(r.errors.len(), 4);
        assert!((r.rmse - 0.125f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rpe(&est, &gt, 5), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn collinear_is_degenerate() {
        let t = traj(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert!(matches!(ate(&t, &t), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn tum_round_trip_within_nine_digits() {
        let t = wiggle(12);
        let mut buf = Vec::new();
        t.write_tum(&mut buf).unwrap();
        let back = Trajectory::read_tum(&buf[..]).unwrap();
        assert_eq!(back.len(), 12);
        for ((ta, pa), (tb, pb)) in t.samples().iter().zip(back.samples()) {
            assert!((ta - tb).abs() < 1e-9);
            let (dt, dr) = pa.distance_to(pb);
            assert!(dt < 1e-7 && dr < 1e-7);
        }
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        write_metrics(&[Metric::new("ate_rmse", 0.25, "m", 10)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,value,unit,samples\nate_rmse,0.25,m,10\n");
    }
}
