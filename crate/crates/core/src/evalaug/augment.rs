use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentOp {
    Noise,
    Shift,
    Flip,
    Rotate,
    CropPad,
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noise" => AugmentOp::Noise,
            "shift" => AugmentOp::Shift,
            "flip" => AugmentOp::Flip,
            "rotate" => AugmentOp::Rotate,
            "crop-pad" => AugmentOp::CropPad,
            _ => return Err(Error::Config(format!("unknown augmentation `{s}`"))),
        })
    }
}

/// Transformation magnitudes. These are defaults, not tuned values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub noise_sd: f64,
    /// Pixels, in each direction.
    pub max_shift: usize,
    pub max_degrees: f64,
    /// Pixels trimmed from each border before rescaling back.
    pub max_crop: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            noise_sd: 0.1,
            max_shift: 2,
            max_degrees: 15.0,
            max_crop: 3,
        }
    }
}

/// Mirrors left to right.
pub fn flip(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = img[r * w + (w - 1 - c)];
        }
    }
    out
}

/// Integer translation with zero fill.
pub fn shift(img: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (sr, sc) = (r - dy, c - dx);
            if (0..h as isize).contains(&sr) && (0..w as isize).contains(&sc) {
                out[(r as usize) * w + c as usize] = img[sr as usize * w + sc as usize];
            }
        }
    }
    out
}

/// Bilinear sample with zero outside the image.
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            img[r as usize * w + c as usize]
        }
    };
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx
}

/// Rotation about the image centre.
pub fn rotate(img: &[f64], h: usize, w: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for col in 0..w {
            let (y, x) = (r as f64 - cy, col as f64 - cx);
            // inverse map into the source
            let sy = c * y - s * x + cy;
            let sx = s * y + c * x + cx;
            out[r * w + col] = bilinear(img, h, w, sy, sx).clamp(0.0, 1.0);
        }
    }
    out
}

/// Keeps rows `top..top+ch` and columns `left..left+cw`, then stretches the
/// window back to `h x w`.
pub fn crop_resize(img: &[f64], h: usize, w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let y = top as f64 + (r as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
            let x = left as f64 + (c as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
            let y = y.clamp(top as f64, (top + ch - 1) as f64);
            let x = x.clamp(left as f64, (left + cw - 1) as f64);
            out[r * w + c] = bilinear(img, h, w, y, x).clamp(0.0, 1.0);
        }
    }
    out
}

fn apply<R: Rng>(op: AugmentOp, img: &[f64], h: usize, w: usize, p: &AugmentParams, rng: &mut R) -> Vec<f64> {
    match op {
        AugmentOp::Noise => img
            .iter()
            .map(|&v| (v + p.noise_sd * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
            .collect(),
        AugmentOp::Shift => {
            let m = p.max_shift as i64;
            let (dy, dx) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
            shift(img, h, w, dy as isize, dx as isize)
        }
        AugmentOp::Flip => flip(img, h, w),
        AugmentOp::Rotate => rotate(img, h, w, rng.random_range(-p.max_degrees..=p.max_degrees)),
        AugmentOp::CropPad => {
            let m = p.max_crop.min(h.min(w).saturating_sub(2) / 2);
            let (ty, by) = (rng.random_range(0..=m), rng.random_range(0..=m));
            let (lx, rx) = (rng.random_range(0..=m), rng.random_range(0..=m));
            crop_resize(img, h, w, ty, lx, h - ty - by, w - lx - rx)
        }
    }
}

/// Appends `factor - 1` transformed copies of every image, each made with one
/// op drawn uniformly from `ops`. Originals come first.
pub fn simple_augment(
    ds: &ImageDataset,
    factor: usize,
    ops: &[AugmentOp],
    params: &AugmentParams,
    seed: u64,
) -> Result<ImageDataset> {
    if factor < 2 {
        return Err(Error::Config(format!("augmentation factor must be >= 2, got {factor}")));
    }
    if ops.is_empty() {
        return Err(Error::Config("no augmentation ops given".into()));
    }
    let (h, w) = (ds.height, ds.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = ds.pixels.clone();
    let mut labels = ds.labels.clone();
    for _ in 1..factor {
        for i in 0..ds.len() {
            let op = ops[rng.random_range(0..ops.len())];
            pixels.extend(apply(op, ds.image(i), h, w, params, &mut rng));
            labels.push(ds.labels[i]);
        }
    }
    ImageDataset::new(labels.len(), h, w, pixels, labels, &format!("{}+aug", ds.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageDataset {
        let px: Vec<f64> = (0..3 * 36).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        ImageDataset::new(3, 6, 6, px, vec![0, 1, 0], "t/train").unwrap()
    }

    #[test]
    fn factor_two_doubles_the_set() {
        let ds = sample();
        let all = [AugmentOp::Noise, AugmentOp::Shift, AugmentOp::Flip, AugmentOp::Rotate, AugmentOp::CropPad];
        let out = simple_augment(&ds, 2, &all, &AugmentParams::default(), 0).unwrap();
        assert_eq!(out.len(), 2 * ds.len());
        assert_eq!(&out.labels[3..], &ds.labels[..]);
        assert!(simple_augment(&ds, 1, &all, &AugmentParams::default(), 0).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let ds = sample();
        let img = ds.image(1);
        assert_eq!(flip(&flip(img, 6, 6), 6, 6), img);
    }

    #[test]
    fn noise_copies_differ() {
        let ds = sample();
        let out = simple_augment(&ds, 2, &[AugmentOp::Noise], &AugmentParams::default(), 3).unwrap();
        for i in 0..ds.len() {
            assert_ne!(out.image(i + ds.len()), ds.image(i));
        }
    }

    #[test]
    fn zero_rotation_and_full_crop_are_identity() {
        let ds = sample();
        let img = ds.image(2);
        let r = rotate(img, 6, 6, 0.0);
        assert!(r.iter().zip(img).all(|(a, b)| (a - b).abs() < 1e-12));
        let c = crop_resize(img, 6, 6, 0, 0, 6, 6);
        assert!(c.iter().zip(img).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(shift(img, 6, 6, 0, 0), img);
    }
}
