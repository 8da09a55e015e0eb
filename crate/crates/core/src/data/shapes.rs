//! Binary disks and rings centred in a square frame.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, Result};

pub const DISK: usize = 0;
pub const RING: usize = 1;

/// Radii and thicknesses are fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub n_disks: usize,
    pub n_rings: usize,
    pub size: usize,
    pub seed: u64,
    pub radius: (f64, f64),
    pub thickness: (f64, f64),
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            n_disks: 90,
            n_rings: 90,
            size: 28,
            seed: 0,
            radius: (0.2, 0.45),
            thickness: (0.05, 0.15),
        }
    }
}

/// Pixels whose centre lies within `inner < dist <= outer` of the frame centre.
fn annulus(size: usize, outer: f64, inner: f64) -> Vec<f64> {
    let c = size as f64 / 2.0;
    let mut px = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 + 0.5 - c, j as f64 + 0.5 - c);
            let r = (x * x + y * y).sqrt();
            px.push(if r <= outer && r > inner { 1.0 } else { 0.0 });
        }
    }
    px
}

/// Disks first, then rings; labels [`DISK`] and [`RING`].
pub fn synth_shapes(cfg: &ShapesConfig) -> Result<ImageDataset> {
    if cfg.size < 16 {
        return Err(Error::Config(format!("shape images need size >= 16, got {}", cfg.size)));
    }
    let ok = |(a, b): (f64, f64)| a > 0.0 && a <= b && b <= 0.5;
    if !ok(cfg.radius) || !ok(cfg.thickness) || cfg.thickness.1 >= cfg.radius.0 {
        return Err(Error::Config(format!(
            "need 0 < thickness < radius <= 0.5, got radius {:?} thickness {:?}",
            cfg.radius, cfg.thickness
        )));
    }
    let s = cfg.size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |(a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..b) };
    let n = cfg.n_disks + cfg.n_rings;
    let mut pixels = Vec::with_capacity(n * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let r = draw(cfg.radius) * s;
        if k < cfg.n_disks {
            pixels.extend(annulus(cfg.size, r, -1.0));
            labels.push(DISK);
        } else {
            let t = draw(cfg.thickness) * s;
            pixels.extend(annulus(cfg.size, r, r - t));
            labels.push(RING);
        }
    }
    ImageDataset::new(n, cfg.size, cfg.size, pixels, labels, "shapes")
}
