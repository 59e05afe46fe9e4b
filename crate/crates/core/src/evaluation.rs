//! Metrics: Fréchet distance / FID, pose error, re-identification and
//! detection rates, plus the blur and pixelation reference filters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::landmarks::{face_mask, inter_ocular_distance, LandmarkSet};

/// Eigenvalues down to this are treated as rounding noise and clamped.
pub const PSD_TOLERANCE: f64 = 1e-8;

fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(m)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// `|μ1-μ2|² + Tr(Σ1 + Σ2 - 2 (Σ1 Σ2)^½)`, with the trace of the cross
/// term taken as `Tr((Σ1^½ Σ2 Σ1^½)^½)`, which has the same eigenvalues but
/// stays symmetric.
pub fn frechet_distance(mu1: &DVector<f64>, sigma1: &DMatrix<f64>, mu2: &DVector<f64>, sigma2: &DMatrix<f64>) -> Result<f64> {
    let n = mu1.len();
    if mu2.len() != n || sigma1.shape() != (n, n) || sigma2.shape() != (n, n) {
        return Err(Error::shape(format!(
            "means {} and {}, covariances {:?} and {:?}",
            n,
            mu2.len(),
            sigma1.shape(),
            sigma2.shape()
        )));
    }
    check_symmetric(sigma1, "sigma1")?;
    check_symmetric(sigma2, "sigma2")?;
    sym_eigen(sigma2)?;
    let s1 = psd_sqrt(sigma1)?;
    let mut inner = &s1 * sigma2 * &s1;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = sym_eigen(&inner)?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    Ok(diff.dot(&diff) + sigma1.trace() + sigma2.trace() - 2.0 * cross)
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mu = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    Ok((mu, cov))
}

pub trait EmbeddingBackend {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
    fn detect(&self, image: &Image) -> Result<bool>;

    fn embed_all(&self, images: &[Image]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(images.len(), self.dim());
        for (i, img) in images.iter().enumerate() {
            let e = self.embed(img)?;
            if e.len() != self.dim() {
                return Err(Error::shape(format!("{} returned dim {}", self.name(), e.len())));
            }
            m.row_mut(i).copy_from_slice(&e);
        }
        Ok(m)
    }
}

/// Small fixed random convolution bank: per filter, the mean and standard
/// deviation of the rectified response, giving `E = 2 * filters`.
#[derive(Debug, Clone)]
pub struct ToyConvEmbedder {
    name: String,
    filters: Vec<Array3<f64>>,
    /// Minimum centre-region standard deviation for `detect`.
    pub detect_threshold: f64,
}

impl ToyConvEmbedder {
    pub fn new(name: impl Into<String>, filters: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..filters)
            .map(|_| Array3::from_shape_fn((3, 3, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        ToyConvEmbedder {
            name: name.into(),
            filters,
            detect_threshold: 0.05,
        }
    }
}

impl EmbeddingBackend for ToyConvEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        2 * self.filters.len()
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let s = image.shape();
        if s[0] != 3 || s[1] < 3 || s[2] < 3 {
            return Err(Error::shape(format!("embedder expects (3, >=3, >=3), got {s:?}")));
        }
        let (h, w) = (s[1] - 2, s[2] - 2);
        let n = (h * w) as f64;
        let mut out = Vec::with_capacity(self.dim());
        for f in &self.filters {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let mut v = 0.0;
                    for ch in 0..3 {
                        for i in 0..3 {
                            for j in 0..3 {
                                v += f[[ch, i, j]] * image[[ch, r + i, c + j]];
                            }
                        }
                    }
                    let v = v.max(0.0);
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            out.push(mean);
            out.push((sq / n - mean * mean).max(0.0).sqrt());
        }
        Ok(out)
    }

    /// A face is "present" when the central half of the image has
    /// structure.
    fn detect(&self, image: &Image) -> Result<bool> {
        let s = image.shape();
        let (h, w) = (s[1], s[2]);
        let centre = image.slice(ndarray::s![.., h / 4..h - h / 4, w / 4..w - w / 4]);
        let gray = centre.mean_axis(Axis(0)).ok_or_else(|| Error::shape("empty image"))?;
        Ok(gray.std(0.0) > self.detect_threshold)
    }
}

/// Built-in backends by name.
pub fn backend_by_name(name: &str) -> Result<Box<dyn EmbeddingBackend>> {
    match name {
        "toy" => Ok(Box::new(ToyConvEmbedder::new("toy", 8, 0))),
        "toy-alt" => Ok(Box::new(ToyConvEmbedder::new("toy-alt", 12, 1))),
        other => Err(Error::InvalidArgument(format!(
            "unknown backend `{other}` (available: toy, toy-alt)"
        ))),
    }
}

pub fn fid(real: &[Image], fake: &[Image], backend: &dyn EmbeddingBackend) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "FID needs at least 2 images per set, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let (m1, s1) = mean_and_covariance(&backend.embed_all(real)?)?;
    let (m2, s2) = mean_and_covariance(&backend.embed_all(fake)?)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Mean per-landmark L1 pixel distance over the reference inter-ocular
/// distance.
pub fn pose_error(detected: &LandmarkSet, reference: &LandmarkSet, size: (usize, usize)) -> Result<f64> {
    if detected.len() != reference.len() {
        return Err(Error::LandmarkCount {
            expected: reference.len(),
            got: detected.len(),
        });
    }
    let iod = inter_ocular_distance(reference, size)?;
    let d = detected.pixel_coords(size);
    let r = reference.pixel_coords(size);
    let total: f64 = d
        .iter()
        .zip(&r)
        .map(|(a, b)| (a.0 - b.0).abs() + (a.1 - b.1).abs())
        .sum();
    Ok(total / d.len() as f64 / iod)
}

/// Source of landmarks for generated images.
pub trait LandmarkDetector {
    fn detect(&self, image_path: &Path) -> Result<LandmarkSet>;
}

/// Reads `<image>.landmarks` next to each image.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarLandmarks;

impl LandmarkDetector for SidecarLandmarks {
    fn detect(&self, image_path: &Path) -> Result<LandmarkSet> {
        LandmarkSet::load(&image_path.with_extension("landmarks"))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of pairs whose distance is strictly below `threshold`.
pub fn reid_rate(distances: &[f64], threshold: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument("no pairs".into()));
    }
    Ok(distances.iter().filter(|&&d| d < threshold).count() as f64 / distances.len() as f64)
}

/// Row-aligned embedding distances between generated and source images.
pub fn pair_distances(generated: &[Image], sources: &[Image], backend: &dyn EmbeddingBackend) -> Result<Vec<f64>> {
    if generated.len() != sources.len() {
        return Err(Error::InvalidArgument(format!(
            "{} generated vs {} sources",
            generated.len(),
            sources.len()
        )));
    }
    generated
        .iter()
        .zip(sources)
        .map(|(g, s)| Ok(euclidean(&backend.embed(g)?, &backend.embed(s)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub rates: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl FoldStats {
    pub fn from_rates(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidArgument("no folds".into()));
        }
        let n = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / n;
        let std = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(FoldStats { rates, mean, std })
    }
}

/// Splits pairs into `folds` contiguous folds of near-equal size.
pub fn reid_rate_folds(distances: &[f64], threshold: f64, folds: usize) -> Result<FoldStats> {
    if folds == 0 {
        return Err(Error::InvalidArgument("fold count must be > 0".into()));
    }
    let n = distances.len();
    let mut rates = Vec::with_capacity(folds);
    for k in 0..folds {
        let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
        if lo == hi {
            return Err(Error::InvalidArgument(format!("fold {k} of {folds} is empty ({n} pairs)")));
        }
        rates.push(reid_rate(&distances[lo..hi], threshold)?);
    }
    FoldStats::from_rates(rates)
}

/// Threshold where the false-accept rate on `impostor` distances meets the
/// false-reject rate on `genuine` distances.
pub fn eer_threshold(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InvalidArgument("calibration needs genuine and impostor pairs".into()));
    }
    let mut all: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = vec![all[0] - 1e-12];
    candidates.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(all[all.len() - 1] + 1e-12);
    let gap = |t: f64| {
        let far = reid_rate(impostor, t).unwrap_or(0.0);
        let frr = 1.0 - reid_rate(genuine, t).unwrap_or(0.0);
        (far - frr).abs()
    };
    Ok(candidates
        .into_iter()
        .min_by(|a, b| gap(*a).total_cmp(&gap(*b)))
        .expect("candidates are non-empty"))
}

pub fn detection_rate(images: &[Image], backend: &dyn EmbeddingBackend) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for img in images {
        hits += backend.detect(img)? as usize;
    }
    Ok(hits as f64 / images.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterMode {
    /// Gaussian blur with an odd square kernel.
    Blur { kernel: usize },
    /// Block means on a grid anchored at the face bounding box.
    Pixelate { block: usize },
}

/// Sigma used for a kernel of size `k` when none is given.
pub fn default_blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn blur_plane(plane: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let r = (kernel.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[[y, clampi(x as isize + k as isize - r, w)]])
                .sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[[clampi(y as isize + k as isize - r, h), x]])
                .sum::<f64>();
        }
    }
    out
}

/// Applies the filter inside the face mask only.
pub fn baseline_filter(image: &Image, lms: &LandmarkSet, mode: FilterMode) -> Result<Image> {
    let s = image.shape();
    if s[0] != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {}", s[0])));
    }
    let (h, w) = (s[1], s[2]);
    let mask = face_mask(lms, (h, w))?;
    let mut out = image.clone();
    match mode {
        FilterMode::Blur { kernel } => {
            if kernel == 0 || kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!("blur kernel {kernel} must be odd")));
            }
            let sigma = default_blur_sigma(kernel);
            let r = (kernel / 2) as f64;
            let mut k: Vec<f64> = (0..kernel)
                .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
                .collect();
            let total: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= total);
            for ch in 0..3 {
                let blurred = blur_plane(&image.index_axis(Axis(0), ch).to_owned(), &k);
                for ((y, x), &m) in mask.indexed_iter() {
                    if m {
                        out[[ch, y, x]] = blurred[[y, x]];
                    }
                }
            }
        }
        FilterMode::Pixelate { block } => {
            if block == 0 {
                return Err(Error::InvalidArgument("pixelation block must be > 0".into()));
            }
            let Some((y0, x0)) = mask
                .indexed_iter()
                .filter(|(_, &m)| m)
                .map(|(p, _)| p)
                .reduce(|a, b| (a.0.min(b.0), a.1.min(b.1)))
            else {
                return Ok(out);
            };
            let key = |y: usize, x: usize| ((y - y0) / block, (x - x0) / block);
            let mut sums: BTreeMap<(usize, usize), ([f64; 3], usize)> = BTreeMap::new();
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    let e = sums.entry(key(y, x)).or_insert(([0.0; 3], 0));
                    for ch in 0..3 {
                        e.0[ch] += image[[ch, y, x]];
                    }
                    e.1 += 1;
                }
            }
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    let (s, n) = sums[&key(y, x)];
                    for ch in 0..3 {
                        out[[ch, y, x]] = s[ch] / n as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidReport {
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub real_count: usize,
    pub fake_count: usize,
    pub pair_count: usize,
    pub fid: BTreeMap<String, f64>,
    /// Absent when no landmarks were found for the generated images.
    pub pose_error_mean: Option<f64>,
    pub pose_pairs: usize,
    pub detection_rate: BTreeMap<String, f64>,
    pub reid_rate: BTreeMap<String, ReidReport>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// One row per backend: FID, pose, detection, re-identification.
    pub fn table(&self) -> String {
        let pose = self
            .pose_error_mean
            .map_or("n/a".to_string(), |p| format!("{p:.4}"));
        let mut rows = vec![[
            "backend".to_string(),
            "FID".into(),
            "pose".into(),
            "detection".into(),
            "re-id".into(),
        ]];
        for (name, fid) in &self.fid {
            let det = self.detection_rate.get(name).copied().unwrap_or(f64::NAN);
            let reid = self
                .reid_rate
                .get(name)
                .map_or("n/a".into(), |r| format!("{:.3} ± {:.3}", r.mean, r.std));
            rows.push([name.clone(), format!("{fid:.4}"), pose.clone(), format!("{det:.3}"), reid]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:>w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// `[[pair]]` entries of an evaluation pairs file; paths relative to the
/// fake and real directories respectively.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsFile {
    pub pair: Vec<PairEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub fake: PathBuf,
    pub source: PathBuf,
}

impl PairsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.to_path_buf(),
                what: "pairs file".into(),
            },
            _ => Error::Io(e),
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| crate::landmarks::line_of(&text, s.start)).unwrap_or(1),
            message: e.message().to_string(),
        })
    }
}
