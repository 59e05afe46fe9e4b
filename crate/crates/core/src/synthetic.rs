//! Parametric face-like images with exact 68-point landmarks, used as the
//! desk-scale dataset.
//!
//! Each identity fixes skin, background and eye colours plus face
//! proportions; each image of an identity varies pose (offset, scale, roll)
//! and mouth opening.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Identity, Sample};
use crate::error::{Error, Result};
use crate::imageio::{from_u8, to_u8};
use crate::landmarks::{LandmarkSet, FULL_LANDMARK_COUNT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            identities: 8,
            images_per_identity: 4,
            resolution: 32,
            seed: 0,
        }
    }
}

fn ring(out: &mut Vec<(f64, f64)>, centre: (f64, f64), rx: f64, ry: f64, n: usize, phase: f64) {
    for i in 0..n {
        let a = phase + 2.0 * PI * i as f64 / n as f64;
        out.push((centre.0 + rx * a.cos(), centre.1 + ry * a.sin()));
    }
}

/// Landmarks in face-local coordinates (`u` right, `v` down, face roughly
/// in `[-1, 1]^2`), standard 68-point order.
pub fn template(face_width: f64, mouth_open: f64) -> Vec<(f64, f64)> {
    let mut p = Vec::with_capacity(FULL_LANDMARK_COUNT);
    // jaw 0-16, ear to ear through the chin
    for i in 0..17 {
        let phi = PI - PI * i as f64 / 16.0;
        p.push((0.9 * face_width * phi.cos(), -0.15 + phi.sin()));
    }
    // brows 17-26
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let u = if side < 0.0 { -0.75 + 0.55 * t } else { 0.2 + 0.55 * t };
            let bump = (PI * t).sin();
            p.push((u * face_width, -0.45 - 0.08 * bump));
        }
    }
    // nose bridge 27-30, base 31-35
    for i in 0..4 {
        p.push((0.0, -0.35 + 0.15 * i as f64));
    }
    for i in 0..5 {
        p.push((-0.2 + 0.1 * i as f64, 0.2));
    }
    // eyes 36-41, 42-47
    ring(&mut p, (-0.4 * face_width, -0.25), 0.15, 0.06, 6, PI);
    ring(&mut p, (0.4 * face_width, -0.25), 0.15, 0.06, 6, PI);
    // mouth outer 48-59, inner 60-67
    ring(&mut p, (0.0, 0.5), 0.35, 0.1 + 0.06 * mouth_open, 12, PI);
    ring(&mut p, (0.0, 0.5), 0.22, 0.02 + 0.06 * mouth_open, 8, PI);
    debug_assert_eq!(p.len(), FULL_LANDMARK_COUNT);
    p
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    centre: (f64, f64),
    scale: (f64, f64),
    roll: f64,
}

impl Pose {
    fn to_image(&self, (u, v): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.roll.sin_cos();
        let (x, y) = (u * self.scale.0, v * self.scale.1);
        (self.centre.0 + c * x - s * y, self.centre.1 + s * x + c * y)
    }

    fn to_local(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.roll.sin_cos();
        let (dx, dy) = (x - self.centre.0, y - self.centre.1);
        ((c * dx + s * dy) / self.scale.0, (-s * dx + c * dy) / self.scale.1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Look {
    skin: [f64; 3],
    background: [f64; 3],
    eyes: [f64; 3],
    lips: [f64; 3],
    face_width: f64,
}

fn colour(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn render(look: &Look, pose: &Pose, mouth_open: f64, res: usize) -> Array3<f64> {
    let mut img = Array3::zeros((3, res, res));
    let d = (res - 1) as f64;
    let eye_l = (-0.4 * look.face_width, -0.25);
    let eye_r = (0.4 * look.face_width, -0.25);
    for r in 0..res {
        for c in 0..res {
            let (x, y) = (c as f64 / d, r as f64 / d);
            let (u, v) = pose.to_local((x, y));
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = look.background[ch] * (0.85 + 0.3 * y);
            }
            // head: ellipse centred at v = -0.15, forehead taller than chin
            let ry = if v > -0.15 { 1.0 } else { 0.95 };
            let head = (u / (0.92 * look.face_width)).powi(2) + ((v + 0.15) / ry).powi(2);
            if head <= 1.0 {
                let shade = 1.0 - 0.25 * head;
                for ch in 0..3 {
                    px[ch] = look.skin[ch] * shade;
                }
                for e in [eye_l, eye_r] {
                    let q = ((u - e.0) / 0.15).powi(2) + ((v - e.1) / 0.07).powi(2);
                    if q <= 1.0 {
                        px = look.eyes;
                    }
                }
                let mouth = (u / 0.35).powi(2) + ((v - 0.5) / (0.1 + 0.06 * mouth_open)).powi(2);
                if mouth <= 1.0 {
                    px = look.lips;
                }
                if u.abs() < 0.04 && (-0.35..0.2).contains(&v) {
                    for ch in 0..3 {
                        px[ch] *= 0.8;
                    }
                }
            }
            for ch in 0..3 {
                // quantize to 8-bit so in-memory data equals its PNG
                img[[ch, r, c]] = from_u8(to_u8(px[ch].clamp(-1.0, 1.0)));
            }
        }
    }
    img
}

/// Generates `identities × images_per_identity` samples at
/// `resolution × resolution`.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.resolution < 8 {
        return Err(Error::InvalidArgument(format!("resolution {} < 8", cfg.resolution)));
    }
    if cfg.identities == 0 || cfg.images_per_identity == 0 {
        return Err(Error::InvalidArgument("need at least one identity and image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut identities = Vec::with_capacity(cfg.identities);
    for id in 0..cfg.identities {
        let look = Look {
            skin: colour(&mut rng, -0.1, 0.8),
            background: colour(&mut rng, -0.9, 0.2),
            eyes: colour(&mut rng, -1.0, -0.4),
            lips: [rng.gen_range(0.2..0.9), rng.gen_range(-0.8..-0.2), rng.gen_range(-0.8..-0.2)],
            face_width: rng.gen_range(0.85..1.1),
        };
        let mut samples = Vec::with_capacity(cfg.images_per_identity);
        for _ in 0..cfg.images_per_identity {
            let pose = Pose {
                centre: (rng.gen_range(0.45..0.55), rng.gen_range(0.48..0.56)),
                scale: {
                    let s = rng.gen_range(0.26..0.32);
                    (s, s * 1.1)
                },
                roll: rng.gen_range(-0.2..0.2),
            };
            let mouth_open = rng.gen_range(0.0..1.0);
            let points: Vec<(f64, f64)> = template(look.face_width, mouth_open)
                .into_iter()
                .map(|p| {
                    let (x, y) = pose.to_image(p);
                    (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
                })
                .collect();
            samples.push(Sample {
                image: render(&look, &pose, mouth_open, cfg.resolution),
                landmarks: LandmarkSet::new(points)?,
                image_path: None,
            });
        }
        identities.push(Identity {
            name: format!("id{id:03}"),
            samples,
        });
    }
    Dataset::new(identities)
}
