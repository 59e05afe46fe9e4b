//! Facial landmark sets, per-landmark heatmap rendering and the face mask
//! used to build context images.
//!
//! Coordinates are normalized `(x, y) = (col, row)` in `[0, 1]`; a coordinate
//! maps to pixel `round(coord * (dim - 1))`.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::Deserialize;

use crate::error::{Error, Result};

pub const FULL_LANDMARK_COUNT: usize = 68;
pub const JAW: Range<usize> = 0..17;
pub const BROWS: Range<usize> = 17..27;
pub const LEFT_EYE: Range<usize> = 36..42;
pub const RIGHT_EYE: Range<usize> = 42..48;

/// An ordered set of normalized 2-D landmarks for one face.
///
/// Full sets hold the 68-point annotation; reduced sets come out of
/// [`LandmarkSubset::apply`] and keep the subset order.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    /// Validates a full 68-point set.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != FULL_LANDMARK_COUNT {
            return Err(Error::LandmarkCount {
                expected: FULL_LANDMARK_COUNT,
                got: points.len(),
            });
        }
        check_range(&points)?;
        let set = LandmarkSet { points };
        let (l, r) = set.eye_centroids_normalized();
        if l == r {
            return Err(Error::ZeroInterOcular);
        }
        Ok(set)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.points.len() == FULL_LANDMARK_COUNT
    }

    /// Parses the one-point-per-line `x y` text format.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut points = Vec::with_capacity(FULL_LANDMARK_COUNT);
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message,
            };
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(parse_err(format!(
                    "expected two fields `x y`, found {}",
                    fields.len()
                )));
            }
            let mut coord = [0.0; 2];
            for (slot, field) in coord.iter_mut().zip(&fields) {
                *slot = field
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("bad number `{field}`: {e}")))?;
            }
            let [x, y] = coord;
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(parse_err(format!(
                    "landmark {} out of range: ({x}, {y}) not in [0,1]",
                    points.len()
                )));
            }
            points.push((x, y));
        }
        if points.len() != FULL_LANDMARK_COUNT {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: last_line.max(1),
                message: format!(
                    "expected {FULL_LANDMARK_COUNT} landmarks, found {}",
                    points.len()
                ),
            });
        }
        LandmarkSet::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.to_path_buf(),
                what: "landmark file".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 24);
        for (x, y) in &self.points {
            out.push_str(&format!("{x} {y}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Pixel-space position (col, row) as continuous coordinates.
    pub fn pixel_coords(&self, (h, w): (usize, usize)) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|&(x, y)| (x * (w as f64 - 1.0), y * (h as f64 - 1.0)))
            .collect()
    }

    fn eye_centroids_normalized(&self) -> ((f64, f64), (f64, f64)) {
        (
            centroid(&self.points[LEFT_EYE]),
            centroid(&self.points[RIGHT_EYE]),
        )
    }
}

fn check_range(points: &[(f64, f64)]) -> Result<()> {
    for (index, &(x, y)) in points.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::LandmarkOutOfRange { index, x, y });
        }
    }
    Ok(())
}

fn centroid(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
    (sx / n, sy / n)
}

pub fn to_pixel(coord: f64, dim: usize) -> usize {
    (coord * (dim as f64 - 1.0)).round() as usize
}

/// Distance in pixels between the left-eye (36–41) and right-eye (42–47)
/// centroids.
pub fn inter_ocular_distance(lms: &LandmarkSet, size: (usize, usize)) -> Result<f64> {
    if !lms.is_full() {
        return Err(Error::LandmarkCount {
            expected: FULL_LANDMARK_COUNT,
            got: lms.len(),
        });
    }
    let px = lms.pixel_coords(size);
    let (lx, ly) = centroid(&px[LEFT_EYE]);
    let (rx, ry) = centroid(&px[RIGHT_EYE]);
    let d = ((rx - lx).powi(2) + (ry - ly).powi(2)).sqrt();
    if d == 0.0 {
        return Err(Error::ZeroInterOcular);
    }
    Ok(d)
}

/// Ordered, validated selection of landmark indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkSubset {
    indices: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsetFile {
    indices: Vec<usize>,
}

impl LandmarkSubset {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidSubset("empty subset".into()));
        }
        let mut seen = [false; FULL_LANDMARK_COUNT];
        for &i in &indices {
            if i >= FULL_LANDMARK_COUNT {
                return Err(Error::InvalidSubset(format!(
                    "index {i} outside [0, {FULL_LANDMARK_COUNT})"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidSubset(format!("duplicate index {i}")));
            }
            seen[i] = true;
        }
        Ok(LandmarkSubset { indices })
    }

    pub fn full() -> Self {
        LandmarkSubset {
            indices: (0..FULL_LANDMARK_COUNT).collect(),
        }
    }

    /// Reads a TOML file with a single `indices = [...]` list.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: SubsetFile = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| line_of(&text, s.start))
                .unwrap_or(1),
            message: e.message().to_string(),
        })?;
        Self::new(file.indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn apply(&self, lms: &LandmarkSet) -> Result<LandmarkSet> {
        let points = self
            .indices
            .iter()
            .map(|&i| {
                lms.points.get(i).copied().ok_or_else(|| {
                    Error::InvalidSubset(format!("index {i} beyond set of {}", lms.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LandmarkSet { points })
    }
}

pub fn select_landmark_subset(lms: &LandmarkSet, indices: &[usize]) -> Result<LandmarkSet> {
    LandmarkSubset::new(indices.to_vec())?.apply(lms)
}

pub(crate) fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// Per-landmark heatmaps, shape `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMap {
    pub data: Array3<f64>,
}

impl LandmarkMap {
    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[1], s[2])
    }

    /// Row-major argmax of each channel as `(row, col)`.
    pub fn argmax(&self) -> Vec<(usize, usize)> {
        self.data
            .outer_iter()
            .map(|ch| {
                let mut best = (0, 0);
                let mut best_v = f64::NEG_INFINITY;
                for ((r, c), &v) in ch.indexed_iter() {
                    if v > best_v {
                        best_v = v;
                        best = (r, c);
                    }
                }
                best
            })
            .collect()
    }
}

/// Renders one isotropic Gaussian (peak 1) per landmark, centred on the
/// landmark's pixel. `sigma == 0` renders a single unit pixel.
pub fn render_landmark_map(
    lms: &LandmarkSet,
    (h, w): (usize, usize),
    sigma: f64,
) -> Result<LandmarkMap> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "resolution {h}x{w} below 8x8"
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be >= 0")));
    }
    check_range(&lms.points)?;
    let mut data = Array3::<f64>::zeros((lms.len(), h, w));
    for (k, &(x, y)) in lms.points.iter().enumerate() {
        let cr = to_pixel(y, h);
        let cc = to_pixel(x, w);
        let mut ch = data.index_axis_mut(Axis(0), k);
        if sigma == 0.0 {
            ch[[cr, cc]] = 1.0;
            continue;
        }
        let denom = 2.0 * sigma * sigma;
        for ((r, c), v) in ch.indexed_iter_mut() {
            let dr = r as f64 - cr as f64;
            let dc = c as f64 - cc as f64;
            *v = (-(dr * dr + dc * dc) / denom).exp().clamp(0.0, 1.0);
        }
    }
    Ok(LandmarkMap { data })
}

/// Background image with the face region filled by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextImage {
    /// `(3, H, W)`
    pub data: Array3<f64>,
    /// `(1, H, W)`, 1 = masked-out face region.
    pub mask: Array3<f64>,
}

pub const MASK_FILL: f64 = 0.0;

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Face region: convex hull of the jaw (0–16) and brow (17–26) landmarks,
/// rasterized on integer pixel positions with the boundary included.
pub fn face_mask(lms: &LandmarkSet, (h, w): (usize, usize)) -> Result<Array2<bool>> {
    if !lms.is_full() {
        return Err(Error::LandmarkCount {
            expected: FULL_LANDMARK_COUNT,
            got: lms.len(),
        });
    }
    let contour: Vec<(i64, i64)> = lms.points[JAW.start..BROWS.end]
        .iter()
        .map(|&(x, y)| (to_pixel(x, w) as i64, to_pixel(y, h) as i64))
        .collect();
    let hull = convex_hull(contour);
    if hull.len() < 3 {
        return Err(Error::DegeneratePolygon(format!(
            "{} distinct non-collinear vertices after rasterization",
            hull.len()
        )));
    }
    let (min_c, max_c) = hull.iter().fold((i64::MAX, i64::MIN), |(a, b), p| {
        (a.min(p.0), b.max(p.0))
    });
    let (min_r, max_r) = hull.iter().fold((i64::MAX, i64::MIN), |(a, b), p| {
        (a.min(p.1), b.max(p.1))
    });
    let mut mask = Array2::from_elem((h, w), false);
    for r in min_r..=max_r {
        for c in min_c..=max_c {
            let p = (c, r);
            let inside = (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0);
            if inside {
                mask[[r as usize, c as usize]] = true;
            }
        }
    }
    Ok(mask)
}

pub fn build_context_image(image: &Array3<f64>, lms: &LandmarkSet) -> Result<ContextImage> {
    let shape = image.shape();
    if shape[0] != 3 {
        return Err(Error::shape(format!(
            "context image expects 3 channels, got {}",
            shape[0]
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mask = face_mask(lms, (h, w))?;
    let mut data = image.clone();
    for mut ch in data.outer_iter_mut() {
        ndarray::Zip::from(&mut ch).and(&mask).for_each(|v, &m| {
            if m {
                *v = MASK_FILL;
            }
        });
    }
    let mask = mask.mapv(|m| if m { 1.0 } else { 0.0 }).insert_axis(Axis(0));
    Ok(ContextImage { data, mask })
}
