//! Landmark attention: efficient channel attention over the concatenated
//! source and condition landmark maps.
//!
//! `omega = sigmoid(conv1d_J(gap(concat(lm_s, lm_c))))`, one weight per
//! channel of the concatenation, shared spatially and computed per sample.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Init, Weights};

/// Per-sample channel weights, shape `(B, 2C)`, every entry in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct AttentionWeights(pub Tensor);

impl AttentionWeights {
    pub fn to_vec2(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.to_vec2::<f64>()?)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `None` when the module is disabled.
    pub weights: Option<AttentionWeights>,
    /// `(B, 2C, H, W)`
    pub maps: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LandmarkAttention {
    pub kernel_size: usize,
    pub enabled: bool,
}

impl LandmarkAttention {
    pub fn new(kernel_size: usize, enabled: bool) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention kernel size must be odd, got {kernel_size}"
            )));
        }
        Ok(LandmarkAttention {
            kernel_size,
            enabled,
        })
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        init.uniform("kernel", &[self.kernel_size], 1.0 / (self.kernel_size as f64).sqrt())
    }

    /// Concatenates the two `(B, C, H, W)` maps and reweights channels.
    /// With the module disabled the concatenation passes through unchanged.
    pub fn forward(&self, w: &Weights, lm_s: &Tensor, lm_c: &Tensor) -> Result<AttentionOutput> {
        if lm_s.dims() != lm_c.dims() {
            return Err(Error::shape(format!(
                "source map {:?} vs condition map {:?}",
                lm_s.dims(),
                lm_c.dims()
            )));
        }
        let maps = Tensor::cat(&[lm_s, lm_c], 1)?;
        if !self.enabled {
            return Ok(AttentionOutput { weights: None, maps });
        }
        let kernel = w.get("kernel")?;
        let omega = attention_weights(&maps, &kernel)?;
        let (b, c) = omega.dims2()?;
        let maps = maps.broadcast_mul(&omega.reshape((b, c, 1, 1))?)?;
        Ok(AttentionOutput {
            weights: Some(AttentionWeights(omega)),
            maps,
        })
    }
}

/// Mean of each channel over its spatial extent: `(B, C, H, W) -> (B, C)`.
pub fn channel_gap(maps: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = maps.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("empty spatial extent"));
    }
    Ok(maps.reshape((b, c, h * w))?.mean(D::Minus1)?)
}

/// Bias-free 1-D convolution along the channel axis with zero padding:
/// `out[k] = sum_j kernel[j] * g[k + j - J/2]`.
pub fn conv1d_channels(g: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_b, n) = g.dims2()?;
    let j = kernel.dim(0)?;
    if j % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size {j} is even")));
    }
    let half = j / 2;
    let padded = g.pad_with_zeros(1, half, half)?;
    let mut acc: Option<Tensor> = None;
    for tap in 0..j {
        let term = padded.narrow(1, tap, n)?.broadcast_mul(&kernel.narrow(0, tap, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("empty kernel".into()))
}

pub fn attention_weights(maps: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let g = channel_gap(maps)?;
    sigmoid(&conv1d_channels(&g, kernel)?)
}
