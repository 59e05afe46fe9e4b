//! Patch discriminators: `d_app` judges (candidate, condition) image pairs,
//! `d_lm` judges (image, landmark map) pairs. Both expose per-layer feature
//! taps for weak feature matching.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, leaky_relu, sigmoid, Init, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    /// Total conv layers `M`; the first `M - 1` halve the resolution.
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: 16,
            layers: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Mean patch probability per sample, `(B,)`.
    pub score: Tensor,
    /// Patch logits `(B, 1, h, w)`.
    pub logits: Tensor,
    /// Feature maps of layers `1..=M`, post-activation (logits for layer M).
    pub features: Vec<Tensor>,
}

impl DiscriminatorOutput {
    /// Taps of layers `m..=M` (1-based).
    pub fn features_from(&self, m: usize) -> Result<&[Tensor]> {
        if m == 0 || m > self.features.len() {
            return Err(Error::InvalidArgument(format!(
                "feature layer {m} outside 1..={}",
                self.features.len()
            )));
        }
        Ok(&self.features[m - 1..])
    }
}

/// Elements per sample in a `(B, C, h, w)` feature map.
pub fn feature_elements(t: &Tensor) -> Result<usize> {
    let (_, c, h, w) = t.dims4()?;
    Ok(c * h * w)
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub in_channels: usize,
    pub config: DiscriminatorConfig,
}

impl PatchDiscriminator {
    pub fn new(in_channels: usize, config: DiscriminatorConfig) -> Result<Self> {
        if config.layers < 2 {
            return Err(Error::Config(format!("discriminator needs >= 2 layers, got {}", config.layers)));
        }
        if config.channels == 0 {
            return Err(Error::Config("discriminator channels must be > 0".into()));
        }
        Ok(PatchDiscriminator { in_channels, config })
    }

    fn width(&self, layer: usize) -> usize {
        self.config.channels << layer.min(3)
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        let m = self.config.layers;
        let mut c_in = self.in_channels;
        for l in 0..m - 1 {
            let c_out = self.width(l);
            init.conv(&format!("conv{l}"), c_in, c_out, 4)?;
            c_in = c_out;
        }
        init.conv(&format!("conv{}", m - 1), c_in, 1, 3)
    }

    pub fn forward(&self, w: &Weights, x: &Tensor) -> Result<DiscriminatorOutput> {
        let (_, c, h, wd) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let factor = 1usize << (self.config.layers - 1);
        if h % factor != 0 || wd % factor != 0 {
            return Err(Error::shape(format!(
                "resolution {h}x{wd} not divisible by {factor}"
            )));
        }
        let m = self.config.layers;
        let mut features = Vec::with_capacity(m);
        let mut y = x.clone();
        for l in 0..m - 1 {
            y = leaky_relu(&conv2d(w, &format!("conv{l}"), &y, 2, 1)?, 0.2)?;
            features.push(y.clone());
        }
        let logits = conv2d(w, &format!("conv{}", m - 1), &y, 1, 1)?;
        features.push(logits.clone());
        let (b, _, ph, pw) = logits.dims4()?;
        let score = sigmoid(&logits)?.reshape((b, ph * pw))?.mean(D::Minus1)?;
        Ok(DiscriminatorOutput {
            score,
            logits,
            features,
        })
    }
}

/// Appearance discriminator over `(candidate ‖ condition)`.
#[derive(Debug, Clone)]
pub struct AppearanceDiscriminator(pub PatchDiscriminator);

impl AppearanceDiscriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        Ok(AppearanceDiscriminator(PatchDiscriminator::new(6, config)?))
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        self.0.init(init)
    }

    pub fn forward(&self, w: &Weights, candidate: &Tensor, condition: &Tensor) -> Result<DiscriminatorOutput> {
        if candidate.dims() != condition.dims() {
            return Err(Error::shape(format!(
                "candidate {:?} vs condition {:?}",
                candidate.dims(),
                condition.dims()
            )));
        }
        self.0.forward(w, &Tensor::cat(&[candidate, condition], 1)?)
    }
}

/// Landmark discriminator over `(image ‖ landmark map)`.
#[derive(Debug, Clone)]
pub struct LandmarkDiscriminator {
    pub net: PatchDiscriminator,
    pub landmark_channels: usize,
}

impl LandmarkDiscriminator {
    pub fn new(config: DiscriminatorConfig, landmark_channels: usize) -> Result<Self> {
        Ok(LandmarkDiscriminator {
            net: PatchDiscriminator::new(3 + landmark_channels, config)?,
            landmark_channels,
        })
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        self.net.init(init)
    }

    pub fn forward(&self, w: &Weights, image: &Tensor, lm_map: &Tensor) -> Result<DiscriminatorOutput> {
        let (b, c, h, wd) = image.dims4()?;
        let (lb, lc, lh, lw) = lm_map.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("image has {c} channels")));
        }
        if lc != self.landmark_channels {
            return Err(Error::shape(format!(
                "landmark map has {lc} channels, configured for {}",
                self.landmark_channels
            )));
        }
        if (b, h, wd) != (lb, lh, lw) {
            return Err(Error::shape(format!(
                "image {:?} vs landmark map {:?}",
                image.dims(),
                lm_map.dims()
            )));
        }
        self.net.forward(w, &Tensor::cat(&[image, lm_map], 1)?)
    }
}
