//! PNG <-> `(3, H, W)` arrays normalized to `[-1, 1]`.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub type Image = Array3<f64>;

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            what: "image".into(),
        });
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = from_u8(px[c]);
        }
    }
    Ok(out)
}

pub fn to_rgb(image: &Image) -> Result<RgbImage> {
    let s = image.shape();
    if s[0] != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {}", s[0])));
    }
    let (h, w) = (s[1], s[2]);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(image[[0, y, x]]),
            to_u8(image[[1, y, x]]),
            to_u8(image[[2, y, x]]),
        ])
    }))
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    to_rgb(image)?.save(path)?;
    Ok(())
}

/// Saves a `[0, 1]` single-channel map as 8-bit grayscale.
pub fn save_gray(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Lays `(H, W)` panels out row-major on a grid with a one-pixel gutter.
pub fn tile_gray(panels: &[Array2<f64>], columns: usize) -> Result<Array2<f64>> {
    let first = panels.first().ok_or_else(|| Error::InvalidArgument("no panels".into()))?;
    let (h, w) = first.dim();
    let columns = columns.max(1);
    let rows = panels.len().div_ceil(columns);
    let mut grid = Array2::zeros((rows * (h + 1) - 1, columns * (w + 1) - 1));
    for (i, p) in panels.iter().enumerate() {
        if p.dim() != (h, w) {
            return Err(Error::shape("panels differ in size"));
        }
        let (r0, c0) = ((i / columns) * (h + 1), (i % columns) * (w + 1));
        grid.slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w]).assign(p);
    }
    Ok(grid)
}
