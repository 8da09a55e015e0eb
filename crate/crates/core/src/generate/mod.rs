//! Sampling new latents and images from a trained model.
//!
//! The metric-volume scheme targets `p(z) ∝ sqrt(det G^{-1}(z))` on the ball
//! `|z| <= R` with plain Euclidean HMC.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::dynamics::{euclidean_leapfrog, PhaseState, Potential};
use crate::error::{Error, Result};
use crate::metric::MetricField;
use crate::model::{Mode, RhvaeModel};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Unnormalized log-density `1/2 log det G^{-1}(z)` on `|z| <= radius`.
#[derive(Clone, Copy, Debug)]
pub struct GenTarget<'a, T> {
    pub field: &'a MetricField<T>,
    pub radius: T,
}

impl<'a, T: Scalar> GenTarget<'a, T> {
    /// Radius `2 max_i |c_i|`.
    pub fn new(field: &'a MetricField<T>) -> Result<Self> {
        Self::with_radius(field, T::lit(2.0) * field.max_centroid_norm())
    }

    pub fn with_radius(field: &'a MetricField<T>, radius: T) -> Result<Self> {
        if !(radius > T::zero()) || !radius.is_finite() {
            return Err(Error::Config(format!("target radius must be > 0, got {radius}")));
        }
        Ok(Self { field, radius })
    }

    pub fn contains(&self, z: &[T]) -> bool {
        z.iter().map(|&a| a * a).sum::<T>() <= self.radius * self.radius
    }

    pub fn log_density(&self, z: &[T]) -> T {
        if !self.contains(z) {
            return T::neg_infinity();
        }
        self.field
            .logdet_inverse(z)
            .map_or(T::nan(), |l| l / T::lit(2.0))
    }
}

impl<T: Scalar> Potential<T> for GenTarget<'_, T> {
    fn value(&self, z: &[T]) -> T {
        self.field
            .logdet_inverse(z)
            .map_or(T::nan(), |l| -l / T::lit(2.0))
    }

    fn grad(&self, z: &[T]) -> Vec<T> {
        match self.field.grad_z_logdet_inverse(z) {
            Ok(g) => g.into_iter().map(|x| -x / T::lit(2.0)).collect(),
            Err(_) => vec![T::nan(); z.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    /// Leapfrog step `gamma`.
    pub step_size: f64,
    /// Leapfrog steps per proposal `l`.
    pub leapfrog_steps: usize,
    /// Kept samples.
    pub samples: usize,
    pub burn_in: usize,
    /// Iterations between kept samples.
    pub thinning: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.03,
            leapfrog_steps: 15,
            samples: 100,
            burn_in: 100,
            thinning: 10,
            seed: 0,
        }
    }
}

impl HmcConfig {
    /// Every kept sample is 300 iterations apart with `l = 15`.
    pub fn long_chain() -> Self {
        Self {
            burn_in: 300,
            thinning: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size < 1.0) {
            return Err(Error::Config(format!("HMC step must lie in (0, 1), got {}", self.step_size)));
        }
        if self.leapfrog_steps == 0 || self.thinning == 0 {
            return Err(Error::Config("leapfrog_steps and thinning must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput<T> {
    pub samples: Vec<Vec<T>>,
    /// Over the kept part of the chain.
    pub acceptance: f64,
    pub burn_in_acceptance: f64,
}

fn std_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// A random centroid plus a little noise, or the origin for an empty field.
fn initial_point<T: Scalar, R: Rng + ?Sized>(target: &GenTarget<'_, T>, rng: &mut R) -> Vec<T> {
    let d = target.field.dim();
    if target.field.is_empty() {
        return vec![T::zero(); d];
    }
    let c = target.field.centroid(rng.random_range(0..target.field.len())).to_vec();
    let jitter = T::lit(1e-2) * target.radius;
    for _ in 0..100 {
        let z: Vec<T> = c.iter().zip(std_normal::<T, _>(rng, d)).map(|(&a, e)| a + jitter * e).collect();
        if target.contains(&z) && target.log_density(&z).is_finite() {
            return z;
        }
    }
    c
}

/// Metropolis-corrected HMC with unit-mass velocity refreshed every iteration.
/// Proposals that end outside the ball are rejected.
pub fn hmc_chain<T: Scalar>(target: &GenTarget<'_, T>, cfg: &HmcConfig, init: Option<Vec<T>>) -> Result<ChainOutput<T>> {
    cfg.validate()?;
    let d = target.field.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = match init {
        Some(z) => z,
        None => initial_point(target, &mut rng),
    };
    if z.len() != d || !target.contains(&z) {
        return Err(Error::Config("HMC initial point must lie inside the target ball".into()));
    }
    let gamma = T::lit(cfg.step_size);
    let half = T::lit(0.5);
    let mut u = Potential::value(target, &z);
    let mut samples = Vec::with_capacity(cfg.samples);
    let (mut acc_burn, mut acc_keep, mut n_keep) = (0usize, 0usize, 0usize);
    let total = cfg.burn_in + cfg.samples * cfg.thinning;
    for it in 0..total {
        let v: Vec<T> = std_normal(&mut rng, d);
        let k0: T = v.iter().map(|&a| a * a).sum::<T>() * half;
        let s = PhaseState { z: z.clone(), v };
        let log_u: f64 = rng.random::<f64>().ln();
        let accepted = match euclidean_leapfrog(target, &s, gamma, cfg.leapfrog_steps) {
            Ok(p) if target.contains(&p.z) => {
                let u1 = Potential::value(target, &p.z);
                let k1: T = p.v.iter().map(|&a| a * a).sum::<T>() * half;
                let dh = (u1 + k1 - u - k0).to_f64_lossy();
                if dh.is_finite() && log_u < -dh {
                    z = p.z;
                    u = u1;
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        if it < cfg.burn_in {
            acc_burn += accepted as usize;
            if it + 1 == cfg.burn_in && (acc_burn as f64) < 0.05 * cfg.burn_in as f64 {
                log::warn!(
                    "HMC acceptance {:.1}% during burn-in; try a smaller step (e.g. {})",
                    100.0 * acc_burn as f64 / cfg.burn_in as f64,
                    cfg.step_size / 2.0
                );
            }
        } else {
            acc_keep += accepted as usize;
            n_keep += 1;
            if (it - cfg.burn_in + 1).is_multiple_of(cfg.thinning) {
                samples.push(z.clone());
            }
        }
    }
    Ok(ChainOutput {
        samples,
        acceptance: acc_keep as f64 / n_keep.max(1) as f64,
        burn_in_acceptance: acc_burn as f64 / cfg.burn_in.max(1) as f64,
    })
}

/// `chains` independent chains with seeds `cfg.seed + i`, run on up to `jobs`
/// threads; output is in chain order.
pub fn hmc_chains<T: Scalar>(
    target: &GenTarget<'_, T>,
    cfg: &HmcConfig,
    chains: usize,
    jobs: usize,
) -> Result<Vec<ChainOutput<T>>> {
    let jobs = jobs.max(1);
    let run = |i: usize| {
        let c = HmcConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        hmc_chain(target, &c, None)
    };
    let mut out = Vec::with_capacity(chains);
    for start in (0..chains).step_by(jobs) {
        let end = (start + jobs).min(chains);
        if end - start == 1 {
            out.push(run(start)?);
            continue;
        }
        let batch: Vec<Result<ChainOutput<T>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (start..end).map(|i| s.spawn(move || run(i))).collect();
            handles.into_iter().map(|h| h.join().expect("HMC worker panicked")).collect()
        });
        for r in batch {
            out.push(r?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Prior,
    MetricVolume,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Scheme::Prior),
            "metric-volume" => Ok(Scheme::MetricVolume),
            other => Err(Error::Config(format!("unknown scheme `{other}` (prior, metric-volume)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Prior => "prior",
            Scheme::MetricVolume => "metric-volume",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated<T> {
    /// `[n, D]` decoder means.
    pub images: Tensor<T>,
    pub latents: Vec<Vec<T>>,
    /// `log sqrt(det G^{-1}(z))` per latent.
    pub log_volume_inv: Vec<T>,
    /// The scheme actually used.
    pub scheme: Scheme,
    pub acceptance: Option<f64>,
}

/// Draws `n` latents with `scheme` and decodes them. The metric-volume scheme
/// falls back to the prior (with a warning) when the model has no trained
/// metric.
pub fn generate<T: Scalar>(model: &RhvaeModel<T>, n: usize, scheme: Scheme, cfg: &HmcConfig) -> Result<Generated<T>> {
    let d = model.latent_dim();
    let mut scheme = scheme;
    if scheme == Scheme::MetricVolume && (model.mode() != Mode::Rhvae || model.field.is_empty()) {
        log::warn!("model has no trained metric; falling back to prior sampling");
        scheme = Scheme::Prior;
    }
    let (latents, acceptance) = match scheme {
        Scheme::Prior => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            ((0..n).map(|_| std_normal(&mut rng, d)).collect(), None)
        }
        Scheme::MetricVolume => {
            let target = GenTarget::new(&model.field)?;
            let out = hmc_chain(&target, &HmcConfig { samples: n, ..cfg.clone() }, None)?;
            (out.samples, Some(out.acceptance))
        }
    };
    decode_latents(model, latents, scheme, acceptance)
}

pub fn decode_latents<T: Scalar>(
    model: &RhvaeModel<T>,
    latents: Vec<Vec<T>>,
    scheme: Scheme,
    acceptance: Option<f64>,
) -> Result<Generated<T>> {
    let d = model.latent_dim();
    let flat: Vec<T> = latents.iter().flatten().copied().collect();
    let images = model.decode(&Tensor::new(&[latents.len(), d], flat)?)?;
    let log_volume_inv = latents
        .iter()
        .map(|z| model.field.logdet_inverse(z).map(|l| l / T::lit(2.0)))
        .collect::<Result<Vec<T>>>()?;
    Ok(Generated {
        images,
        latents,
        log_volume_inv,
        scheme,
        acceptance,
    })
}

impl<T: Scalar> Generated<T> {
    pub fn to_dataset(&self, height: usize, width: usize, label: usize) -> Result<ImageDataset> {
        let tag = format!("generated/{}", self.scheme);
        ImageDataset::from_features(&self.images, height, width, vec![label; self.latents.len()], &tag)
    }

    /// `index,z0,...,log_sqrt_det_inv_metric`
    pub fn write_latent_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.latents.first().map_or(0, Vec::len);
        let cols: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
        writeln!(f, "index,{},log_sqrt_det_inv_metric", cols.join(","))?;
        for (i, (z, lv)) in self.latents.iter().zip(&self.log_volume_inv).enumerate() {
            let zs: Vec<String> = z.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{i},{},{lv}", zs.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Fraction of `latents` whose `log sqrt(det G)` exceeds the median over
/// `reference` by more than `margin` nats.
pub fn volume_excess_rate<T: Scalar>(
    field: &MetricField<T>,
    latents: &[Vec<T>],
    reference: &[Vec<T>],
    margin: f64,
) -> Result<f64> {
    let lv = |z: &Vec<T>| field.log_volume(z).map(|v| v.to_f64_lossy());
    let mut r: Vec<f64> = reference.iter().map(lv).collect::<Result<_>>()?;
    if r.is_empty() || latents.is_empty() {
        return Err(Error::Usage("volume excess needs reference and sample latents".into()));
    }
    r.sort_by(f64::total_cmp);
    let median = if r.len() % 2 == 1 {
        r[r.len() / 2]
    } else {
        (r[r.len() / 2 - 1] + r[r.len() / 2]) / 2.0
    };
    let mut over = 0;
    for z in latents {
        if lv(z)? > median + margin {
            over += 1;
        }
    }
    Ok(over as f64 / latents.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> MetricField<f64> {
        MetricField::empty(2, 0.8, 0.5).unwrap()
    }

    #[test]
    fn constant_target_mean_is_zero() {
        let f = empty();
        let t = GenTarget::with_radius(&f, 1.0).unwrap();
        let cfg = HmcConfig {
            samples: 2000,
            thinning: 2,
            ..HmcConfig::default()
        };
        let out = hmc_chain(&t, &cfg, None).unwrap();
        assert_eq!(out.samples.len(), 2000);
        assert!(out.samples.iter().all(|z| t.contains(z)));
        for i in 0..2 {
            let m = out.samples.iter().map(|z| z[i]).sum::<f64>() / 2000.0;
            // var of a uniform-disk coordinate is R^2/4
            assert!(m.abs() < 3.0 * (0.25f64 / 2000.0).sqrt(), "mean {m}");
        }
    }

    #[test]
    fn tiny_steps_always_accept() {
        let f = MetricField::new(2, vec![0.5, 0.0], vec![1.0, 0.0, 0.2, 0.8], 0.8, 0.1).unwrap();
        let t = GenTarget::new(&f).unwrap();
        let cfg = HmcConfig {
            step_size: 1e-6,
            leapfrog_steps: 1,
            samples: 50,
            burn_in: 0,
            thinning: 1,
            seed: 1,
        };
        assert!(hmc_chain(&t, &cfg, None).unwrap().acceptance > 0.999);
    }

    #[test]
    fn sharp_centroid_attracts_mass() {
        let c = [0.6f64, -0.3];
        let f = MetricField::new(2, c.to_vec(), vec![30.0, 0.0, 0.0, 30.0], 0.3, 1e-3).unwrap();
        let t = GenTarget::with_radius(&f, 2.0).unwrap();
        let cfg = HmcConfig {
            step_size: 0.01,
            samples: 1000,
            thinning: 3,
            ..HmcConfig::default()
        };
        let out = hmc_chain(&t, &cfg, Some(c.to_vec())).unwrap();
        let near = out
            .samples
            .iter()
            .filter(|z| ((z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2)).sqrt() < 3.0 * 0.3)
            .count();
        assert!(near as f64 > 0.95 * 1000.0, "{near}");
    }

    #[test]
    fn chains_are_seeded_and_ordered() {
        let f = empty();
        let t = GenTarget::with_radius(&f, 1.0).unwrap();
        let cfg = HmcConfig {
            samples: 20,
            ..HmcConfig::default()
        };
        let a = hmc_chains(&t, &cfg, 3, 2).unwrap();
        let b = hmc_chains(&t, &cfg, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].samples, a[1].samples);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let f = empty();
        assert!(GenTarget::new(&f).is_err());
        let bad = HmcConfig {
            step_size: 1.5,
            ..HmcConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
