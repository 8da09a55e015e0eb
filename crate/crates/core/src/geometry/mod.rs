//! Curve length, energy and geodesics under a [`MetricField`].

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::MetricField;
use crate::model::RhvaeModel;
use crate::numcore::{linalg, Tensor};
use crate::scalar::Scalar;

/// `M + 1` points with fixed endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteCurve<T> {
    pub points: Vec<Vec<T>>,
}

impl<T: Scalar> DiscreteCurve<T> {
    pub fn new(points: Vec<Vec<T>>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Config(format!("a curve needs at least 2 segments, got {}", points.len().saturating_sub(1))));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Usage("curve points must share a nonzero dimension".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Usage("curve points must be finite".into()));
        }
        Ok(Self { points })
    }

    /// Straight segment from `a` to `b` cut into `segments` pieces.
    pub fn linear(a: &[T], b: &[T], segments: usize) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape("curve endpoints", &[a.len()], &[b.len()]));
        }
        let m = T::from_usize(segments).unwrap();
        Self::new(
            (0..=segments)
                .map(|k| {
                    let t = T::from_usize(k).unwrap() / m;
                    a.iter().zip(b).map(|(&x, &y)| x + t * (y - x)).collect()
                })
                .collect(),
        )
    }

    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn reversed(&self) -> Self {
        Self {
            points: self.points.iter().rev().cloned().collect(),
        }
    }

    /// Point at parameter `t` in `[0, 1]`, interpolating between nodes.
    pub fn at(&self, t: T) -> Vec<T> {
        let m = self.segments();
        let s = (t.max(T::zero()).min(T::one())) * T::from_usize(m).unwrap();
        let i = s.floor().to_usize().unwrap_or(0).min(m - 1);
        let w = s - T::from_usize(i).unwrap();
        self.points[i]
            .iter()
            .zip(&self.points[i + 1])
            .map(|(&a, &b)| a + w * (b - a))
            .collect()
    }
}

fn segment<T: Scalar>(a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let half = T::lit(0.5);
    (
        a.iter().zip(b).map(|(&x, &y)| y - x).collect(),
        a.iter().zip(b).map(|(&x, &y)| half * (x + y)).collect(),
    )
}

/// `dz^T G(midpoint) dz` for each segment.
fn segment_quads<T: Scalar>(field: &MetricField<T>, c: &DiscreteCurve<T>) -> Result<Vec<T>> {
    c.points
        .windows(2)
        .map(|w| {
            let (dz, mid) = segment(&w[0], &w[1]);
            Ok(linalg::quad_form(&field.metric(&mid)?, &dz))
        })
        .collect()
}

/// `sum_s sqrt(dz_s^T G(m_s) dz_s)` with midpoints `m_s`.
pub fn curve_length<T: Scalar>(field: &MetricField<T>, c: &DiscreteCurve<T>) -> Result<T> {
    Ok(segment_quads(field, c)?.into_iter().map(|q| q.max(T::zero()).sqrt()).sum())
}

/// `M sum_s dz_s^T G(m_s) dz_s`; at least `length^2`, with equality for constant speed.
pub fn curve_energy<T: Scalar>(field: &MetricField<T>, c: &DiscreteCurve<T>) -> Result<T> {
    let m = T::from_usize(c.segments()).unwrap();
    Ok(m * segment_quads(field, c)?.into_iter().sum::<T>())
}

/// Gradient of [`curve_energy`] with respect to every point (endpoints included).
pub fn curve_energy_grad<T: Scalar>(field: &MetricField<T>, c: &DiscreteCurve<T>) -> Result<Vec<Vec<T>>> {
    let d = c.dim();
    let m = T::from_usize(c.segments()).unwrap();
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let mut grad = vec![vec![T::zero(); d]; c.points.len()];
    for (s, w) in c.points.windows(2).enumerate() {
        let (dz, mid) = segment(&w[0], &w[1]);
        let g = field.metric(&mid)?;
        let gdz = linalg::matvec(&g, &dz);
        let dginv = field.grad_z_inverse_metric(&mid)?;
        for k in 0..d {
            // d/dm_k (dz^T G dz) = -(G dz)^T dG^{-1}/dz_k (G dz)
            let dq = -linalg::quad_form(&dginv[k * d * d..(k + 1) * d * d], &gdz);
            grad[s][k] += m * (-two * gdz[k] + half * dq);
            grad[s + 1][k] += m * (two * gdz[k] + half * dq);
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicConfig {
    pub segments: usize,
    pub max_iters: usize,
    /// Stop once an accepted step lowers the energy by less than this.
    pub tolerance: f64,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            segments: 50,
            max_iters: 2000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geodesic<T> {
    pub curve: DiscreteCurve<T>,
    pub energy: T,
    pub length: T,
    pub iterations: usize,
    pub converged: bool,
    /// Energy after each accepted step, starting with the initial curve.
    pub energies: Vec<T>,
}

/// Solves `(2 - 1 ... ) x = b` (second-difference matrix) in place.
fn solve_second_difference<T: Scalar>(b: &mut [T]) {
    let n = b.len();
    if n == 0 {
        return;
    }
    let two = T::lit(2.0);
    let mut c = vec![T::zero(); n];
    let mut denom = two;
    c[0] = -T::one() / denom;
    b[0] /= denom;
    for i in 1..n {
        denom = two + c[i - 1];
        c[i] = -T::one() / denom;
        b[i] = (b[i] + b[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        let next = b[i + 1];
        b[i] -= c[i] * next;
    }
}

/// Minimizes the discrete energy over interior points, starting from the
/// straight line. Descent directions are smoothed by the inverse
/// second-difference operator and scaled by `G^{-1}` at each point; step
/// lengths are found by halving.
pub fn geodesic<T: Scalar>(field: &MetricField<T>, a: &[T], b: &[T], cfg: &GeodesicConfig) -> Result<Geodesic<T>> {
    if a.len() != field.dim() || b.len() != field.dim() {
        return Err(Error::shape("geodesic endpoints", &[a.len(), b.len()], &[field.dim(), field.dim()]));
    }
    let mut curve = DiscreteCurve::linear(a, b, cfg.segments.max(2))?;
    let d = curve.dim();
    let n_inner = curve.segments() - 1;
    let mut energy = curve_energy(field, &curve)?;
    let mut energies = vec![energy];
    let mut step = T::one();
    let mut converged = false;
    let mut iterations = 0;
    let tol = T::lit(cfg.tolerance);
    while iterations < cfg.max_iters {
        iterations += 1;
        let grad = curve_energy_grad(field, &curve)?;
        let inner = &grad[1..=n_inner];
        let gnorm: T = inner.iter().flatten().map(|&g| g * g).sum();
        if gnorm == T::zero() {
            converged = true;
            break;
        }
        let mut dir: Vec<Vec<T>> = inner
            .iter()
            .zip(&curve.points[1..=n_inner])
            .map(|(g, p)| Ok(linalg::matvec(&field.inverse_metric(p)?, g)))
            .collect::<Result<_>>()?;
        for k in 0..d {
            let mut col: Vec<T> = dir.iter().map(|v| v[k]).collect();
            solve_second_difference(&mut col);
            for (v, c) in dir.iter_mut().zip(col) {
                v[k] = c;
            }
        }
        let slope: T = dir.iter().flatten().zip(inner.iter().flatten()).map(|(&p, &g)| p * g).sum();
        if !(slope > T::zero()) {
            dir = inner.to_vec();
        }
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = curve.clone();
            for (p, v) in trial.points[1..=n_inner].iter_mut().zip(&dir) {
                for (x, &dv) in p.iter_mut().zip(v) {
                    *x -= step * dv;
                }
            }
            let e = curve_energy(field, &trial)?;
            if e < energy {
                accepted = Some((trial, e));
                break;
            }
            step /= T::lit(2.0);
        }
        let Some((trial, e)) = accepted else {
            converged = true;
            break;
        };
        let decrease = energy - e;
        curve = trial;
        energy = e;
        energies.push(e);
        step *= T::lit(2.0);
        if decrease < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("geodesic solver hit {} iterations without converging", cfg.max_iters);
    }
    let length = curve_length(field, &curve)?;
    Ok(Geodesic {
        curve,
        energy,
        length,
        iterations,
        converged,
        energies,
    })
}

/// Writes `t,z0,...,speed` rows; speed is the Riemannian speed of the segment
/// leaving each point.
pub fn write_path_csv<T: Scalar>(field: &MetricField<T>, c: &DiscreteCurve<T>, path: &Path) -> Result<()> {
    let quads = segment_quads(field, c)?;
    let m = c.segments();
    let mf = T::from_usize(m).unwrap();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cols: Vec<String> = (0..c.dim()).map(|i| format!("z{i}")).collect();
    writeln!(f, "t,{},speed", cols.join(","))?;
    for (i, p) in c.points.iter().enumerate() {
        let t = i as f64 / m as f64;
        let speed = quads[i.min(m - 1)].max(T::zero()).sqrt() * mf;
        let zs: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{t},{},{speed}", zs.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathMode {
    Linear,
    Geodesic,
}

impl std::str::FromStr for PathMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(PathMode::Linear),
            "geodesic" => Ok(PathMode::Geodesic),
            other => Err(Error::Config(format!("unknown path mode `{other}` (linear, geodesic)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation<T> {
    pub latents: Vec<Vec<T>>,
    /// `[steps, D]`
    pub images: Tensor<T>,
    /// The solved curve in geodesic mode.
    pub geodesic: Option<Geodesic<T>>,
}

/// `steps` points equally spaced in the curve parameter, decoded.
pub fn interpolate_decode<T: Scalar>(
    model: &RhvaeModel<T>,
    a: &[T],
    b: &[T],
    steps: usize,
    mode: PathMode,
    cfg: &GeodesicConfig,
) -> Result<Interpolation<T>> {
    if steps < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let d = model.latent_dim();
    let (curve, geo) = match mode {
        PathMode::Linear => (DiscreteCurve::linear(a, b, cfg.segments.max(2))?, None),
        PathMode::Geodesic => {
            let g = geodesic(&model.field, a, b, cfg)?;
            (g.curve.clone(), Some(g))
        }
    };
    let last = T::from_usize(steps - 1).unwrap();
    let latents: Vec<Vec<T>> = (0..steps).map(|k| curve.at(T::from_usize(k).unwrap() / last)).collect();
    let flat: Vec<T> = latents.iter().flatten().copied().collect();
    let images = model.decode(&Tensor::new(&[steps, d], flat)?)?;
    Ok(Interpolation {
        latents,
        images,
        geodesic: geo,
    })
}

/// Mean binary entropy (nats) of the pixels in `images`.
pub fn mean_pixel_entropy<T: Scalar>(images: &[T]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let h = |p: f64| {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    };
    images.iter().map(|v| h(v.to_f64_lossy())).sum::<f64>() / images.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field() -> MetricField<f64> {
        MetricField::new(
            2,
            vec![-1.0, 0.0, 1.0, 0.0],
            vec![0.2, 0.0, 0.0, 0.2, 0.2, 0.0, 0.0, 0.2],
            0.8,
            1e-2,
        )
        .unwrap()
    }

    #[test]
    fn constant_metric_scales_length() {
        let f = MetricField::<f64>::empty(2, 1.0, 0.25).unwrap();
        let c = DiscreteCurve::linear(&[0.0, 0.0], &[3.0, 4.0], 10).unwrap();
        assert!((curve_length(&f, &c).unwrap() - 10.0).abs() < 1e-12);
        assert!((curve_energy(&f, &c).unwrap() - 100.0).abs() < 1e-10);
    }

    #[test]
    fn reversal_and_refinement() {
        let f = field();
        let c = DiscreteCurve::linear(&[-1.2, 0.3], &[1.1, -0.2], 40).unwrap();
        let l = curve_length(&f, &c).unwrap();
        assert!((l - curve_length(&f, &c.reversed()).unwrap()).abs() < 1e-10);
        let fine = DiscreteCurve::linear(&[-1.2, 0.3], &[1.1, -0.2], 80).unwrap();
        assert!(((curve_length(&f, &fine).unwrap() - l) / l).abs() < 0.01);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let f = field();
        let mut c = DiscreteCurve::linear(&[-1.2, 0.3], &[1.1, -0.2], 6).unwrap();
        c.points[2][1] += 0.3;
        c.points[4][0] -= 0.2;
        let g = curve_energy_grad(&f, &c).unwrap();
        let h = 1e-6;
        for i in 0..c.points.len() {
            for k in 0..2 {
                let mut up = c.clone();
                up.points[i][k] += h;
                let mut dn = c.clone();
                dn.points[i][k] -= h;
                let fd = (curve_energy(&f, &up).unwrap() - curve_energy(&f, &dn).unwrap()) / (2.0 * h);
                assert!((fd - g[i][k]).abs() < 1e-5 * (1.0 + fd.abs()), "{i},{k}: {fd} vs {}", g[i][k]);
            }
        }
    }

    #[test]
    fn constant_metric_geodesic_is_straight() {
        let f = MetricField::<f64>::empty(2, 1.0, 0.5).unwrap();
        let g = geodesic(&f, &[0.0, 1.0], &[2.0, -1.0], &GeodesicConfig::default()).unwrap();
        let line = DiscreteCurve::linear(&[0.0, 1.0], &[2.0, -1.0], 50).unwrap();
        for (p, q) in g.curve.points.iter().zip(&line.points) {
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn geodesic_energy_decreases_and_beats_the_line() {
        let f = field();
        let (a, b) = ([-1.0, 0.4], [1.0, 0.4]);
        let cfg = GeodesicConfig {
            segments: 30,
            ..GeodesicConfig::default()
        };
        let g = geodesic(&f, &a, &b, &cfg).unwrap();
        assert!(g.energies.windows(2).all(|w| w[1] <= w[0]));
        let line = curve_length(&f, &DiscreteCurve::linear(&a, &b, 30).unwrap()).unwrap();
        assert!(g.length < line, "{} vs {line}", g.length);
        let back = geodesic(&f, &b, &a, &cfg).unwrap();
        assert!((back.length - g.length).abs() < 1e-3 * g.length);
    }

    #[test]
    fn second_difference_solver() {
        let mut b = vec![1.0f64, 0.0, 0.0, 2.0];
        let orig = b.clone();
        solve_second_difference(&mut b);
        for i in 0..4 {
            let left = if i > 0 { b[i - 1] } else { 0.0 };
            let right = if i < 3 { b[i + 1] } else { 0.0 };
            assert!((2.0 * b[i] - left - right - orig[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_parameter_lookup() {
        let c = DiscreteCurve::<f64>::linear(&[0.0], &[1.0], 4).unwrap();
        assert_eq!(c.at(0.0), vec![0.0]);
        assert_eq!(c.at(1.0), vec![1.0]);
        assert!((c.at(0.3)[0] - 0.3).abs() < 1e-15);
        assert!(DiscreteCurve::<f64>::new(vec![vec![0.0], vec![1.0]]).is_err());
    }
}
