//! Dense score/descriptor grids, non-maximum suppression with spacing-aware
//! sampling, and descriptor matching.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DVector, Vector2};

use crate::error::{Error, Result};
use crate::io_util::{fmt_f64, LineReader};

/// Ratio between the score map and the descriptor map resolution.
pub const GRID_RATIO: usize = 8;

pub const DEFAULT_MAX_DESCRIPTOR_DISTANCE: f64 = 0.7;
pub const DEFAULT_RATIO: f64 = 0.9;

const GRID_MAGIC: &str = "HILOC-GRID v1";

pub type Descriptor = DVector<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    /// Fast, track-friendly features that do not survive appearance change.
    Handcrafted,
    /// Slow, match-robust features used against the prior map.
    Learned,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Handcrafted => "handcrafted",
            Channel::Learned => "learned",
        })
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "handcrafted" => Ok(Channel::Handcrafted),
            "learned" => Ok(Channel::Learned),
            other => Err(Error::invalid(format!("unknown channel '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    /// `(u, v)` = (column, row) in pixels.
    pub pixel: Vector2<f64>,
    pub score: f64,
    /// Unit-norm descriptor.
    pub descriptor: Descriptor,
    pub channel: Channel,
}

/// Score map (H x W) plus a coarse descriptor map (H/8 x W/8 x D), both
/// stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    descriptor_dim: usize,
    scores: Vec<f64>,
    descriptors: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        descriptor_dim: usize,
        scores: Vec<f64>,
        descriptors: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(GRID_RATIO) || !width.is_multiple_of(GRID_RATIO) {
            return Err(Error::invalid(format!(
                "grid size {height}x{width} must be a positive multiple of {GRID_RATIO}"
            )));
        }
        if descriptor_dim == 0 {
            return Err(Error::invalid("descriptor dimension must be positive"));
        }
        if scores.len() != height * width {
            return Err(Error::invalid("score map size mismatch"));
        }
        let cells = (height / GRID_RATIO) * (width / GRID_RATIO);
        if descriptors.len() != cells * descriptor_dim {
            return Err(Error::invalid("descriptor map size mismatch"));
        }
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::invalid(format!("score {bad} is not finite and >= 0")));
        }
        if descriptors.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("descriptor map has non-finite values"));
        }
        Ok(Self {
            height,
            width,
            descriptor_dim,
            scores,
            descriptors,
        })
    }

    pub fn zeros(height: usize, width: usize, descriptor_dim: usize) -> Result<Self> {
        let cells = (height / GRID_RATIO) * (width / GRID_RATIO);
        Self::new(
            height,
            width,
            descriptor_dim,
            vec![0.0; height * width],
            vec![0.0; cells * descriptor_dim],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn cell_rows(&self) -> usize {
        self.height / GRID_RATIO
    }

    pub fn cell_cols(&self) -> usize {
        self.width / GRID_RATIO
    }

    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Sets a score. Negative or non-finite values are rejected.
    pub fn set_score(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::invalid(format!("score {value} is not finite and >= 0")));
        }
        self.scores[row * self.width + col] = value;
        Ok(())
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cell_cols() + col) * self.descriptor_dim;
        &self.descriptors[start..start + self.descriptor_dim]
    }

    pub fn set_cell(&mut self, row: usize, col: usize, value: &[f64]) -> Result<()> {
        if value.len() != self.descriptor_dim || value.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("descriptor cell dimension mismatch or non-finite"));
        }
        let start = (row * self.cell_cols() + col) * self.descriptor_dim;
        self.descriptors[start..start + self.descriptor_dim].copy_from_slice(value);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{GRID_MAGIC}")?;
        writeln!(out, "{} {} {}", self.height, self.width, self.descriptor_dim)?;
        for row in self.scores.chunks(self.width) {
            write_row(&mut out, row)?;
        }
        for cell in self.descriptors.chunks(self.descriptor_dim) {
            write_row(&mut out, cell)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = LineReader::new(input);
        let (n, magic) = lines.next_line()?.ok_or_else(|| Error::parse(1, "empty grid file"))?;
        if magic.trim() != GRID_MAGIC {
            return Err(Error::parse(n, format!("expected '{GRID_MAGIC}'")));
        }
        let (n, header) = lines
            .next_line()?
            .ok_or_else(|| Error::parse(2, "missing grid header"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(n, e.to_string()))?;
        let [height, width, dim] = dims[..] else {
            return Err(Error::parse(n, "expected 'H W D'"));
        };
        if height % GRID_RATIO != 0 || width % GRID_RATIO != 0 || height == 0 || width == 0 {
            return Err(Error::parse(n, "grid size must be a positive multiple of 8"));
        }
        let cells = (height / GRID_RATIO) * (width / GRID_RATIO);
        let mut scores = Vec::with_capacity(height * width);
        let mut descriptors = Vec::with_capacity(cells * dim);
        while let Some((n, line)) = lines.next_line()? {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(n, format!("bad value '{tok}'")))?;
                if scores.len() < height * width {
                    scores.push(v);
                } else if descriptors.len() < cells * dim {
                    descriptors.push(v);
                } else {
                    return Err(Error::parse(n, "trailing values"));
                }
            }
        }
        if descriptors.len() != cells * dim {
            return Err(Error::parse(lines.line_number(), "truncated grid"));
        }
        Self::new(height, width, dim, scores, descriptors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(file)
    }
}

fn write_row<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            out.write_all(b" ")?;
        }
        first = false;
        out.write_all(fmt_f64(*v).as_bytes())?;
    }
    out.write_all(b"\n")?;
    Ok(())
}

/// `ceil(sqrt(H * W / (2 * max_count)))`.
pub fn default_min_spacing(height: usize, width: usize, max_count: usize) -> f64 {
    ((height * width) as f64 / (2 * max_count.max(1)) as f64)
        .sqrt()
        .ceil()
}

fn is_strict_local_max(grid: &FeatureGrid, row: usize, col: usize) -> bool {
    let s = grid.score(row, col);
    let r0 = row.saturating_sub(1);
    let c0 = col.saturating_sub(1);
    let r1 = (row + 1).min(grid.height - 1);
    let c1 = (col + 1).min(grid.width - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if (r, c) != (row, col) && grid.score(r, c) >= s {
                return false;
            }
        }
    }
    true
}

/// Orders candidates by descending score, then by `(row, col)`.
pub(crate) fn candidate_order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then((a.1, a.2).cmp(&(b.1, b.2)))
}

/// Keeps strict 3x3 maxima of the score map, then greedily accepts them in
/// score order while every accepted pair stays at least `min_spacing` apart.
pub fn detect_keypoints(
    grid: &FeatureGrid,
    max_count: usize,
    min_spacing: f64,
) -> Result<Vec<Keypoint>> {
    if grid.height < 3 || grid.width < 3 {
        return Err(Error::invalid("grid smaller than 3x3"));
    }
    if max_count < 1 {
        return Err(Error::invalid("max_count must be >= 1"));
    }
    if !(min_spacing >= 1.0) {
        return Err(Error::invalid("min_spacing must be >= 1"));
    }

    let mut candidates = Vec::new();
    for row in 0..grid.height {
        for col in 0..grid.width {
            if is_strict_local_max(grid, row, col) {
                candidates.push((grid.score(row, col), row, col));
            }
        }
    }
    candidates.sort_by(candidate_order);

    // Bucket grid with cell size min_spacing: conflicts can only sit in the
    // 3x3 neighbourhood of buckets.
    let bucket = min_spacing;
    let bcols = (grid.width as f64 / bucket).ceil() as usize + 1;
    let brows = (grid.height as f64 / bucket).ceil() as usize + 1;
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); bcols * brows];
    let spacing2 = min_spacing * min_spacing;

    let mut accepted = Vec::new();
    for (score, row, col) in candidates {
        if accepted.len() >= max_count {
            break;
        }
        let (x, y) = (col as f64, row as f64);
        let bx = (x / bucket) as usize;
        let by = (y / bucket) as usize;
        let clear = (by.saturating_sub(1)..=(by + 1).min(brows - 1)).all(|r| {
            (bx.saturating_sub(1)..=(bx + 1).min(bcols - 1)).all(|c| {
                buckets[r * bcols + c]
                    .iter()
                    .all(|(px, py)| (px - x).powi(2) + (py - y).powi(2) >= spacing2)
            })
        });
        if !clear {
            continue;
        }
        buckets[by * bcols + bx].push((x, y));
        let pixel = Vector2::new(x, y);
        let descriptor = sample_descriptor(grid, &pixel)?.descriptor;
        accepted.push(Keypoint {
            pixel,
            score,
            descriptor,
            channel: Channel::Learned,
        });
    }
    Ok(accepted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledDescriptor {
    pub descriptor: Descriptor,
    /// Set when the interpolated vector was zero and the first basis vector
    /// was substituted.
    pub degenerate: bool,
}

/// Bilinear interpolation of the descriptor map at `pixel / 8`, L2-normalized.
/// Descriptor cell `(r, c)` is anchored at pixel `(8c, 8r)`; positions past the
/// last anchor clamp to the border cell.
pub fn sample_descriptor(grid: &FeatureGrid, pixel: &Vector2<f64>) -> Result<SampledDescriptor> {
    let raw = interpolate_descriptor(grid, pixel)?;
    let norm = raw.norm();
    if norm > 0.0 && norm.is_finite() {
        Ok(SampledDescriptor {
            descriptor: raw / norm,
            degenerate: false,
        })
    } else {
        let mut e1 = DVector::zeros(grid.descriptor_dim);
        e1[0] = 1.0;
        Ok(SampledDescriptor {
            descriptor: e1,
            degenerate: true,
        })
    }
}

/// Un-normalized bilinear sample, exposed for callers that need the raw blend.
pub fn interpolate_descriptor(grid: &FeatureGrid, pixel: &Vector2<f64>) -> Result<Descriptor> {
    let (u, v) = (pixel.x, pixel.y);
    if !(u >= 0.0 && v >= 0.0 && u <= (grid.width - 1) as f64 && v <= (grid.height - 1) as f64) {
        return Err(Error::invalid(format!("pixel ({u}, {v}) outside the grid")));
    }
    let max_c = (grid.cell_cols() - 1) as f64;
    let max_r = (grid.cell_rows() - 1) as f64;
    let gx = (u / GRID_RATIO as f64).min(max_c);
    let gy = (v / GRID_RATIO as f64).min(max_r);
    let c0 = gx.floor() as usize;
    let r0 = gy.floor() as usize;
    let c1 = (c0 + 1).min(grid.cell_cols() - 1);
    let r1 = (r0 + 1).min(grid.cell_rows() - 1);
    let ax = gx - c0 as f64;
    let ay = gy - r0 as f64;

    let mut out = DVector::zeros(grid.descriptor_dim);
    for (r, c, w) in [
        (r0, c0, (1.0 - ax) * (1.0 - ay)),
        (r0, c1, ax * (1.0 - ay)),
        (r1, c0, (1.0 - ax) * ay),
        (r1, c1, ax * ay),
    ] {
        if w != 0.0 {
            for (o, x) in out.iter_mut().zip(grid.cell(r, c)) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescriptorMatch {
    pub index: usize,
    pub distance: f64,
}

/// Nearest neighbour with an absolute threshold and a ratio test over
/// `(index, descriptor)` pairs.
pub fn best_descriptor_match<'a, I>(
    query: &Descriptor,
    candidates: I,
    max_distance: f64,
    ratio: f64,
) -> Result<Option<DescriptorMatch>>
where
    I: IntoIterator<Item = (usize, &'a Descriptor)>,
{
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio {ratio} outside (0, 1]")));
    }
    let mut best: Option<DescriptorMatch> = None;
    let mut second = f64::INFINITY;
    for (index, d) in candidates {
        if d.len() != query.len() {
            return Err(Error::invalid(format!(
                "descriptor dimension {} does not match query dimension {}",
                d.len(),
                query.len()
            )));
        }
        let distance = query
            .iter()
            .zip(d.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        match best {
            Some(b) if distance >= b.distance => second = second.min(distance),
            _ => {
                if let Some(b) = best {
                    second = second.min(b.distance);
                }
                best = Some(DescriptorMatch { index, distance });
            }
        }
    }
    Ok(best.filter(|b| b.distance <= max_distance && b.distance <= ratio * second))
}

pub fn match_descriptor(
    query: &Descriptor,
    candidates: &[Keypoint],
    max_distance: f64,
    ratio: f64,
) -> Result<Option<DescriptorMatch>> {
    best_descriptor_match(
        query,
        candidates.iter().enumerate().map(|(i, k)| (i, &k.descriptor)),
        max_distance,
        ratio,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_grid(h: usize, w: usize, peak: (usize, usize)) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(h, w, 4).unwrap();
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - peak.0 as f64).powi(2) + (c as f64 - peak.1 as f64).powi(2);
                g.set_score(r, c, (-d2 / 8.0).exp()).unwrap();
            }
        }
        g
    }

    fn kp(desc: &[f64]) -> Keypoint {
        Keypoint {
            pixel: Vector2::zeros(),
            score: 1.0,
            descriptor: DVector::from_column_slice(desc),
            channel: Channel::Learned,
        }
    }

    #[test]
    fn single_blob_gives_single_keypoint() {
        let g = blob_grid(80, 80, (40, 40));
        let kps = detect_keypoints(&g, 10, 4.0).unwrap();
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].pixel, Vector2::new(40.0, 40.0));
    }

    #[test]
    fn constant_map_has_no_keypoints() {
        let g = FeatureGrid::new(16, 16, 1, vec![0.5; 256], vec![1.0; 4]).unwrap();
        assert!(detect_keypoints(&g, 10, 1.0).unwrap().is_empty());
    }

    #[test]
    fn detect_rejects_bad_args() {
        let g = FeatureGrid::zeros(8, 8, 1).unwrap();
        assert!(detect_keypoints(&g, 0, 1.0).is_err());
        assert!(detect_keypoints(&g, 1, 0.5).is_err());
    }

    #[test]
    fn grid_rejects_bad_shapes_and_scores() {
        assert!(FeatureGrid::zeros(12, 16, 2).is_err());
        assert!(FeatureGrid::new(8, 8, 1, vec![-1.0; 64], vec![0.0]).is_err());
        assert!(FeatureGrid::new(8, 8, 1, vec![f64::NAN; 64], vec![0.0]).is_err());
    }

    #[test]
    fn sample_at_cell_anchor_returns_cell() {
        let mut g = FeatureGrid::zeros(16, 16, 3).unwrap();
        g.set_cell(1, 1, &[0.0, 3.0, 4.0]).unwrap();
        let s = sample_descriptor(&g, &Vector2::new(8.0, 8.0)).unwrap();
        assert!(!s.degenerate);
        assert!((s.descriptor - DVector::from_column_slice(&[0.0, 0.6, 0.8])).norm() < 1e-15);
    }

    #[test]
    fn sample_midway_between_cells() {
        let mut g = FeatureGrid::zeros(16, 16, 2).unwrap();
        g.set_cell(0, 0, &[1.0, 0.0]).unwrap();
        g.set_cell(0, 1, &[0.0, 1.0]).unwrap();
        let s = sample_descriptor(&g, &Vector2::new(4.0, 0.0)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.descriptor - DVector::from_column_slice(&[h, h])).norm() < 1e-15);
    }

    #[test]
    fn zero_cells_fall_back_to_first_basis_vector() {
        let g = FeatureGrid::zeros(8, 8, 3).unwrap();
        let s = sample_descriptor(&g, &Vector2::new(2.0, 2.0)).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.descriptor, DVector::from_column_slice(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn sample_out_of_bounds_fails() {
        let g = FeatureGrid::zeros(8, 8, 3).unwrap();
        assert!(sample_descriptor(&g, &Vector2::new(8.0, 0.0)).is_err());
        assert!(sample_descriptor(&g, &Vector2::new(-0.1, 0.0)).is_err());
    }

    #[test]
    fn match_empty_and_exact() {
        let q = DVector::from_column_slice(&[1.0, 0.0]);
        assert_eq!(match_descriptor(&q, &[], 0.7, 0.9).unwrap(), None);
        let m = match_descriptor(&q, &[kp(&[1.0, 0.0])], 0.7, 0.9).unwrap().unwrap();
        assert_eq!(m.index, 0);
        assert_eq!(m.distance, 0.0);
    }

    #[test]
    fn ambiguous_match_is_rejected() {
        let q = DVector::from_column_slice(&[0.0, 0.0]);
        let c = [kp(&[0.3, 0.0]), kp(&[0.0, 0.32])];
        assert_eq!(match_descriptor(&q, &c, 0.7, 0.9).unwrap(), None);
        // 0.3 <= 0.95 * 0.32 = 0.304
        assert_eq!(match_descriptor(&q, &c, 0.7, 0.95).unwrap().unwrap().index, 0);
    }

    #[test]
    fn match_dimension_mismatch() {
        let q = DVector::from_column_slice(&[1.0, 0.0]);
        assert!(match_descriptor(&q, &[kp(&[1.0, 0.0, 0.0])], 0.7, 0.9).is_err());
    }

    #[test]
    fn match_distance_threshold() {
        let q = DVector::from_column_slice(&[1.0, 0.0]);
        assert_eq!(match_descriptor(&q, &[kp(&[0.0, 1.0])], 0.7, 0.9).unwrap(), None);
    }

    #[test]
    fn grid_text_round_trip_is_bit_exact() {
        let mut g = blob_grid(16, 24, (5, 7));
        g.set_cell(1, 2, &[0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = FeatureGrid::read_from(&buf[..]).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn grid_parse_errors_carry_line_numbers() {
        let text = "HILOC-GRID v1\n8 8 1\nx\n";
        match FeatureGrid::read_from(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn default_spacing() {
        assert_eq!(default_min_spacing(480, 640, 500), 18.0);
    }
}
