use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhvae::data::{content_key, synth_shapes, write_idx, IdxArray, ImageDataset, ShapesConfig};
use rhvae::evalaug::{run_plan, AugmentationPlan, Composition};
use rhvae::generate::{generate, HmcConfig};
use rhvae::geometry::{interpolate_decode, mean_pixel_entropy, write_path_csv, DiscreteCurve, GeodesicConfig};
use rhvae::metric::BoundingBox;
use rhvae::model::{load_checkpoint, save_checkpoint, train, Mode, ModelConfig, RhvaeModel, TrainConfig};
use rhvae::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{Cli, DataArgs, GenerateArgs, InterpolateArgs, MapArgs, PlanArgs, TrainArgs};
use crate::output::{Failure, Outcome, RunDir};
use crate::pgm::write_montage;

/// Names the directory used to cache the built-in corpus.
pub const CACHE_ENV: &str = "RHVAE_CACHE_DIR";

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {}", path.display(), e.message())))
}

/// Settings for `train`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub mode: Option<Mode>,
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub shapes: ShapesConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub latent_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub temperature: Option<f64>,
    pub lambda: Option<f64>,
    pub beta0: Option<f64>,
    pub fixed_point_iters: Option<usize>,
}

impl ModelOverrides {
    fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        c.latent_dim = self.latent_dim.unwrap_or(c.latent_dim);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.steps = self.steps.unwrap_or(c.steps);
        c.step_size = self.step_size.unwrap_or(c.step_size);
        c.temperature = self.temperature.unwrap_or(c.temperature);
        c.lambda = self.lambda.unwrap_or(c.lambda);
        c.beta0 = self.beta0.unwrap_or(c.beta0);
        c.fixed_point_iters = self.fixed_point_iters.unwrap_or(c.fixed_point_iters);
        c
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateFile {
    pub hmc: HmcConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateFile {
    pub geodesic: GeodesicConfig,
    pub shapes: ShapesConfig,
}

/// Built-in corpus at 8-bit precision, read from the cache directory when
/// one is configured.
fn shapes(cfg: &ShapesConfig) -> Outcome<ImageDataset> {
    let quantized = || -> Outcome<(ImageDataset, IdxArray, IdxArray)> {
        let (i, l) = synth_shapes(cfg)?.to_idx()?;
        Ok((ImageDataset::from_idx(&i, &l, "shapes")?, i, l))
    };
    let Some(cache) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return Ok(quantized()?.0);
    };
    let key = content_key(serde_json::to_string(cfg).expect("plain config").as_bytes());
    let dir = cache.join(format!("shapes-{}", &key[..16]));
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
    if images.exists() && labels.exists() {
        log::info!("using cached corpus {}", dir.display());
        return Ok(ImageDataset::load_idx(&images, &labels)?.with_provenance("shapes"));
    }
    let (ds, i, l) = quantized()?;
    std::fs::create_dir_all(&dir)?;
    let tmp = (dir.join(".images.partial"), dir.join(".labels.partial"));
    write_idx(&tmp.0, &i)?;
    write_idx(&tmp.1, &l)?;
    std::fs::rename(&tmp.0, &images)?;
    std::fs::rename(&tmp.1, &labels)?;
    Ok(ds)
}

fn load_data(data: &DataArgs, cfg: &ShapesConfig, dir: &mut RunDir) -> Outcome<(ImageDataset, Value)> {
    match (&data.images, &data.labels) {
        (Some(i), Some(l)) => {
            if let Some(missing) = [i, l].into_iter().find(|p| !p.exists()) {
                return Err(Failure::usage(format!("missing input file {}", missing.display())));
            }
            let ds = ImageDataset::load_idx(i, l)?;
            dir.input(i)?;
            dir.input(l)?;
            Ok((ds, json!({ "images": i, "labels": l })))
        }
        _ => Ok((shapes(cfg)?, json!({ "shapes": cfg }))),
    }
}

fn image_side(model: &RhvaeModel<f64>, side: Option<usize>) -> Outcome<usize> {
    let d = model.input_dim();
    let s = side.unwrap_or_else(|| (d as f64).sqrt().round() as usize);
    if s * s != d {
        return Err(Failure::usage(format!(
            "input dimension {d} is not a {s}x{s} image; pass --side"
        )));
    }
    Ok(s)
}

fn checkpoint(path: &Path, dir: &mut RunDir) -> Outcome<RhvaeModel<f64>> {
    let m = load_checkpoint(path)?;
    dir.input(path)?;
    Ok(m)
}

pub fn train_cmd(cli: &Cli, a: &TrainArgs, dir: &mut RunDir) -> Outcome<Value> {
    let file: TrainFile = read_config(cli.config.as_deref())?;
    let shapes_cfg = ShapesConfig {
        seed: cli.seed,
        ..file.shapes.clone()
    };
    let (ds, source) = load_data(&a.data, &shapes_cfg, dir)?;
    let mode = a.mode.or(file.mode).unwrap_or(Mode::Rhvae);
    let cfg = file.model.apply(ModelConfig::shapes_preset(ds.dim()).with_mode(mode));
    let tc = TrainConfig {
        seed: cli.seed,
        max_epochs: a.epochs.unwrap_or(file.train.max_epochs),
        patience: a.patience.unwrap_or(file.train.patience),
        learning_rate: a.learning_rate.unwrap_or(file.train.learning_rate),
        batch_size: a.batch_size.or(file.train.batch_size),
        ..file.train.clone()
    };
    let mut model = RhvaeModel::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(cli.seed))?;
    let report = train(&mut model, &ds.features(), &tc)?;
    save_checkpoint(&model, &dir.path("model.ckpt"))?;
    report.write_csv(&dir.path("elbo.csv"))?;
    println!(
        "best elbo {:.4} at epoch {} ({} epochs{})",
        report.best_elbo,
        report.best_epoch,
        report.trace.len(),
        if report.stopped_early { ", stopped early" } else { "" }
    );
    Ok(json!({ "data": source, "model": cfg, "train": tc }))
}

pub fn generate_cmd(cli: &Cli, a: &GenerateArgs, dir: &mut RunDir) -> Outcome<Value> {
    let file: GenerateFile = read_config(cli.config.as_deref())?;
    let model = checkpoint(&a.checkpoint, dir)?;
    let side = image_side(&model, a.side)?;
    let hmc = HmcConfig {
        seed: cli.seed,
        burn_in: a.burn_in.unwrap_or(file.hmc.burn_in),
        thinning: a.thinning.unwrap_or(file.hmc.thinning),
        ..file.hmc.clone()
    };
    if a.n == 0 {
        return Err(Failure::usage("-n must be >= 1"));
    }
    let g = generate(&model, a.n, a.scheme, &hmc)?;
    let ds = g.to_dataset(side, side, a.label)?;
    ds.save_idx(&dir.path("images.idx"), &dir.path("labels.idx"))?;
    g.write_latent_csv(&dir.path("latents.csv"))?;
    let cols = (a.n as f64).sqrt().ceil() as usize;
    write_montage(&dir.path("samples.pgm"), &ds.pixels, ds.len(), side, cols)?;
    if let Some(acc) = g.acceptance {
        println!("HMC acceptance {acc:.3}");
    }
    Ok(json!({ "n": a.n, "scheme": g.scheme, "requested_scheme": a.scheme, "label": a.label, "hmc": hmc }))
}

pub fn interpolate_cmd(cli: &Cli, a: &InterpolateArgs, dir: &mut RunDir) -> Outcome<Value> {
    let file: InterpolateFile = read_config(cli.config.as_deref())?;
    let model = checkpoint(&a.checkpoint, dir)?;
    let side = image_side(&model, a.side)?;
    let d = model.latent_dim();
    let (za, zb, source) = match (&a.latents, &a.between) {
        (Some(z), _) => {
            if z.len() != 2 * d {
                return Err(Failure::usage(format!("--latents needs {} values, got {}", 2 * d, z.len())));
            }
            (z[..d].to_vec(), z[d..].to_vec(), json!({ "latents": z }))
        }
        (None, Some(idx)) => {
            let shapes_cfg = ShapesConfig {
                seed: cli.seed,
                ..file.shapes.clone()
            };
            let (ds, source) = load_data(&a.data, &shapes_cfg, dir)?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
                return Err(Failure::usage(format!("index {bad} outside the {} images", ds.len())));
            }
            let (mu, _) = model.encode(&ds.features::<f64>().select_rows(idx))?;
            (mu.row(0).to_vec(), mu.row(1).to_vec(), json!({ "data": source, "between": idx }))
        }
        (None, None) => return Err(Failure::usage("give --between FROM TO or --latents")),
    };
    let interp = interpolate_decode(&model, &za, &zb, a.steps, a.mode, &file.geodesic)?;
    let tag = format!("{:?}", a.mode).to_lowercase();
    let frames = dir.path(&format!("frames-{tag}"));
    std::fs::create_dir_all(&frames)?;
    let px: Vec<f64> = interp.images.data().to_vec();
    for k in 0..a.steps {
        let img = &px[k * side * side..(k + 1) * side * side];
        write_montage(&frames.join(format!("frame-{k:03}.pgm")), img, 1, side, 1)?;
    }
    write_montage(&dir.path(&format!("strip-{tag}.pgm")), &px, a.steps, side, a.steps)?;
    let curve = match &interp.geodesic {
        Some(g) => g.curve.clone(),
        None => DiscreteCurve::linear(&za, &zb, file.geodesic.segments)?,
    };
    write_path_csv(&model.field, &curve, &dir.path(&format!("path-{tag}.csv")))?;
    let mid = &px[(a.steps / 2) * side * side..(a.steps / 2 + 1) * side * side];
    println!("mid-path pixel entropy {:.4}", mean_pixel_entropy(mid));
    if let Some(g) = &interp.geodesic {
        println!("geodesic length {:.4} after {} iterations", g.length, g.iterations);
    }
    Ok(json!({ "endpoints": source, "mode": a.mode, "steps": a.steps, "geodesic": file.geodesic }))
}

pub fn map_cmd(_cli: &Cli, a: &MapArgs, dir: &mut RunDir) -> Outcome<Value> {
    let model = checkpoint(&a.checkpoint, dir)?;
    let bbox = BoundingBox::around(&model.field, a.margin)?;
    let map = model.field.volume_map(bbox, a.res)?;
    map.write_pgm(std::io::BufWriter::new(std::fs::File::create(dir.path("volume.pgm"))?))?;
    map.write_csv(std::io::BufWriter::new(std::fs::File::create(dir.path("volume.csv"))?))?;
    let d = model.latent_dim();
    let mut csv = String::from("index,x,y\n");
    for i in 0..model.field.len() {
        let c = model.field.centroid(i);
        csv.push_str(&format!("{i},{},{}\n", c[0], c[d - 1]));
    }
    std::fs::write(dir.path("centroids.csv"), csv)?;
    println!("log volume range [{:.4}, {:.4}]", map.min, map.max);
    Ok(json!({ "res": a.res, "margin": a.margin, "bbox": bbox }))
}

/// Built-in held-out corpus: a fresh draw with the next seed.
fn test_data(a: &PlanArgs, seed: u64, dir: &mut RunDir) -> Outcome<(ImageDataset, Value)> {
    let data = DataArgs {
        images: a.test_images.clone(),
        labels: a.test_labels.clone(),
    };
    let cfg = ShapesConfig {
        seed: seed.wrapping_add(1),
        ..ShapesConfig::default()
    };
    let (ds, v) = load_data(&data, &cfg, dir)?;
    let tag = format!("{}/test", ds.provenance.split('/').next().unwrap_or("test"));
    Ok((ds.with_provenance(&tag), v))
}

fn plan_for(cli: &Cli, a: &PlanArgs) -> Outcome<AugmentationPlan> {
    let mut plan = match a.plan.as_deref().or(cli.config.as_deref()) {
        Some(p) => AugmentationPlan::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::usage(format!("cannot read plan {}: {io}", p.display())),
            e => Failure::usage(format!("{}: {e}", p.display())),
        })?,
        None => AugmentationPlan::default(),
    };
    plan.seed = cli.seed;
    plan.split.seed = cli.seed;
    plan.composition = a.composition.unwrap_or(plan.composition);
    plan.repetitions = a.repetitions.unwrap_or(plan.repetitions);
    plan.samples_per_class = a.samples_per_class.unwrap_or(plan.samples_per_class);
    plan.validate()?;
    Ok(plan)
}

fn run_plan_cmd(cli: &Cli, a: &PlanArgs, dir: &mut RunDir, plan: AugmentationPlan, stem: &str) -> Outcome<Value> {
    let shapes_cfg = ShapesConfig {
        seed: cli.seed,
        ..ShapesConfig::default()
    };
    let (data, source) = load_data(&a.data, &shapes_cfg, dir)?;
    let (test, test_source) = test_data(a, cli.seed, dir)?;
    let report = run_plan(&plan, &data, &test, cli.jobs)?;
    report.write(&dir.path(""), stem)?;
    print!("{}", report.table());
    Ok(json!({ "plan": plan, "data": source, "test": test_source }))
}

pub fn augment_cmd(cli: &Cli, a: &PlanArgs, dir: &mut RunDir) -> Outcome<Value> {
    let plan = plan_for(cli, a)?;
    let stem = plan.composition.to_string();
    run_plan_cmd(cli, a, dir, plan, &stem)
}

pub fn evaluate_cmd(cli: &Cli, a: &PlanArgs, dir: &mut RunDir) -> Outcome<Value> {
    let mut plan = plan_for(cli, a)?;
    plan.gan_scores = true;
    plan.composition = Composition::BaselineOnly;
    run_plan_cmd(cli, a, dir, plan, "gan")
}
