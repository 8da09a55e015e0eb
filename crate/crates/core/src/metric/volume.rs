use std::io::Write;

use serde::{Deserialize, Serialize};

use super::MetricField;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned rectangle in a 2-D latent space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Config(format!(
                "degenerate bounding box [{x_min},{x_max}]x[{y_min},{y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    /// Square box enclosing every centroid, padded by `margin`.
    pub fn around<T: Scalar>(field: &MetricField<T>, margin: f64) -> Result<Self> {
        let r = field.max_centroid_norm().to_f64_lossy().max(1.0) + margin;
        Self::new(-r, r, -r, r)
    }
}

/// `log sqrt(det G)` sampled on a `resolution x resolution` grid.
///
/// Row 0 is the top of the image (`y = y_max`); column 0 is `x = x_min`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMap {
    pub bbox: BoundingBox,
    pub resolution: usize,
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl VolumeMap {
    pub(super) fn compute<T: Scalar>(field: &MetricField<T>, bbox: BoundingBox, resolution: usize) -> Result<Self> {
        if field.dim() != 2 {
            return Err(Error::UnsupportedDimension(field.dim()));
        }
        if resolution < 2 {
            return Err(Error::Config(format!("resolution must be >= 2, got {resolution}")));
        }
        let mut values = Vec::with_capacity(resolution * resolution);
        for row in 0..resolution {
            for col in 0..resolution {
                let (x, y) = Self::coords(&bbox, resolution, row, col);
                let lv = field.log_volume(&[T::lit(x), T::lit(y)])?;
                values.push(lv.to_f64_lossy());
            }
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            bbox,
            resolution,
            values,
            min,
            max,
        })
    }

    /// Latent coordinates of grid cell `(row, col)`.
    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        Self::coords(&self.bbox, self.resolution, row, col)
    }

    fn coords(b: &BoundingBox, res: usize, row: usize, col: usize) -> (f64, f64) {
        let step = (res - 1) as f64;
        let x = b.x_min + (b.x_max - b.x_min) * col as f64 / step;
        let y = b.y_max - (b.y_max - b.y_min) * row as f64 / step;
        (x, y)
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.resolution + col]
    }

    /// Binary 16-bit PGM (P5, big-endian samples) with linear min-max scaling.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.resolution;
        write!(w, "P5\n{n} {n}\n65535\n")?;
        let span = self.max - self.min;
        let mut buf = Vec::with_capacity(2 * self.values.len());
        for &v in &self.values {
            let s = if span > 0.0 {
                ((v - self.min) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            };
            buf.extend_from_slice(&s.to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// `x,y,log_volume` rows in grid order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,log_volume")?;
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                let (x, y) = self.point(row, col);
                writeln!(w, "{x},{y},{}", self.value(row, col))?;
            }
        }
        Ok(())
    }
}
