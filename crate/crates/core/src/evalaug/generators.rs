use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{simple_augment, AugmentOp, AugmentParams};
use super::par_map;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::generate::{generate, HmcConfig, Scheme};
use crate::model::{train, Mode, ModelConfig, RhvaeModel, TrainConfig, TrainReport};

/// How synthetic images for one class are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// An autoencoder trained on the class, sampled with `scheme`.
    Vae {
        #[serde(default = "default_mode")]
        mode: Mode,
        #[serde(default = "default_scheme")]
        scheme: Scheme,
        /// Overrides the preset's hidden width.
        #[serde(default)]
        hidden: Option<usize>,
        #[serde(default)]
        train: TrainConfig,
        #[serde(default)]
        hmc: HmcConfig,
    },
    /// Resamples the class's own images.
    Copy {},
    /// Random basic transformations of the class's images.
    Augment {
        ops: Vec<AugmentOp>,
        #[serde(default)]
        params: AugmentParams,
    },
}

fn default_mode() -> Mode {
    Mode::Rhvae
}

fn default_scheme() -> Scheme {
    Scheme::MetricVolume
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::Vae {
            mode: default_mode(),
            scheme: default_scheme(),
            hidden: None,
            train: TrainConfig::default(),
            hmc: HmcConfig::default(),
        }
    }
}

impl GeneratorSpec {
    pub fn name(&self) -> String {
        match self {
            GeneratorSpec::Vae { mode, scheme, .. } => format!("{}/{scheme}", format!("{mode:?}").to_lowercase()),
            GeneratorSpec::Copy {} => "copy".into(),
            GeneratorSpec::Augment { .. } => "augment".into(),
        }
    }
}

/// A generator fitted to one class.
pub enum ClassGenerator {
    Model {
        label: usize,
        model: Box<RhvaeModel<f64>>,
        scheme: Scheme,
        hmc: HmcConfig,
        report: TrainReport,
        height: usize,
        width: usize,
    },
    Copy(ImageDataset),
    Augment {
        data: ImageDataset,
        ops: Vec<AugmentOp>,
        params: AugmentParams,
    },
}

impl ClassGenerator {
    /// `n` images carrying this generator's class label.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ImageDataset> {
        match self {
            ClassGenerator::Model {
                label,
                model,
                scheme,
                hmc,
                height,
                width,
                ..
            } => {
                let cfg = HmcConfig { seed, ..hmc.clone() };
                generate(model, n, *scheme, &cfg)?.to_dataset(*height, *width, *label)
            }
            ClassGenerator::Copy(data) => Ok(resample(data, n, seed).with_provenance("generated/copy")),
            ClassGenerator::Augment { data, ops, params } => {
                let base = resample(data, n, seed);
                let aug = simple_augment(&base, 2, ops, params, seed)?;
                let idx: Vec<usize> = (n..2 * n).collect();
                Ok(aug.subset(&idx).with_provenance("generated/augment"))
            }
        }
    }
}

/// `n` images drawn from `data`: whole passes in order, then a random remainder.
fn resample(data: &ImageDataset, n: usize, seed: u64) -> ImageDataset {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut idx: Vec<usize> = all.iter().copied().cycle().take(n - n % data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.extend(all.choose_multiple(&mut rng, n % data.len()));
    data.subset(&idx)
}

/// Refuses data whose provenance marks it as validation or test data.
pub fn check_generator_input(ds: &ImageDataset) -> Result<()> {
    let held_out = ds
        .provenance
        .split('+')
        .filter_map(|tag| tag.rsplit('/').next())
        .any(|part| part == "val" || part == "test");
    if held_out {
        return Err(Error::Usage(format!(
            "generators may only see training data, got `{}`",
            ds.provenance
        )));
    }
    Ok(())
}

/// Fits one generator per class of `train`, in class order, up to `jobs` at a time.
pub fn fit_generators(spec: &GeneratorSpec, train_set: &ImageDataset, seed: u64, jobs: usize) -> Result<Vec<ClassGenerator>> {
    check_generator_input(train_set)?;
    let classes: Vec<usize> = (0..train_set.num_classes())
        .filter(|&c| !train_set.class_indices(c).is_empty())
        .collect();
    if classes.is_empty() {
        return Err(Error::Usage("no classes to fit generators on".into()));
    }
    let fit = |&c: &usize| -> Result<ClassGenerator> {
        let data = train_set.subset(&train_set.class_indices(c));
        Ok(match spec {
            GeneratorSpec::Vae {
                mode,
                scheme,
                hidden,
                train: tc,
                hmc,
            } => {
                let mut cfg = ModelConfig::shapes_preset(data.dim()).with_mode(*mode);
                if let Some(h) = hidden {
                    cfg.hidden = *h;
                }
                let class_seed = seed.wrapping_add(c as u64);
                let mut model = RhvaeModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(class_seed))?;
                let tc = TrainConfig {
                    seed: class_seed,
                    ..tc.clone()
                };
                let report = train(&mut model, &data.features(), &tc)?;
                log::info!("class {c}: generator best elbo {:.3} at epoch {}", report.best_elbo, report.best_epoch);
                ClassGenerator::Model {
                    label: c,
                    model: Box::new(model),
                    scheme: *scheme,
                    hmc: hmc.clone(),
                    report,
                    height: data.height,
                    width: data.width,
                }
            }
            GeneratorSpec::Copy {} => ClassGenerator::Copy(data),
            GeneratorSpec::Augment { ops, params } => ClassGenerator::Augment {
                data,
                ops: ops.clone(),
                params: params.clone(),
            },
        })
    };
    par_map(&classes, jobs, fit).into_iter().collect()
}

/// `per_class` images from each generator, concatenated in class order.
pub fn synthesize(generators: &[ClassGenerator], per_class: usize, seed: u64) -> Result<ImageDataset> {
    if per_class == 0 {
        return Err(Error::Config("samples per class must be >= 1".into()));
    }
    let parts = generators
        .iter()
        .enumerate()
        .map(|(i, g)| g.sample(per_class, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageDataset> = parts.iter().collect();
    let mut out = ImageDataset::concat(&refs)?;
    out.provenance = parts[0].provenance.clone();
    Ok(out)
}
