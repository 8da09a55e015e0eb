use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::classify::{ClassifierSpec, Trainer};
use super::generators::{fit_generators, synthesize, GeneratorSpec};
use super::metrics::{score, Metrics, Stat};
use super::par_map;
use crate::data::{split, ImageDataset, SplitSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Composition {
    #[serde(rename = "baseline-only")]
    BaselineOnly,
    #[serde(rename = "synthetic-only")]
    SyntheticOnly,
    #[serde(rename = "baseline+synthetic")]
    BaselinePlusSynthetic,
}

impl std::fmt::Display for Composition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Composition::BaselineOnly => "baseline-only",
            Composition::SyntheticOnly => "synthetic-only",
            Composition::BaselinePlusSynthetic => "baseline+synthetic",
        })
    }
}

impl std::str::FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline-only" => Composition::BaselineOnly,
            "synthetic-only" => Composition::SyntheticOnly,
            "baseline+synthetic" => Composition::BaselinePlusSynthetic,
            _ => return Err(Error::Config(format!("unknown composition `{s}`"))),
        })
    }
}

/// An augmentation experiment, usually read from TOML:
///
/// ```toml
/// composition = "baseline+synthetic"
/// samples_per_class = 200
/// repetitions = 5
/// seed = 0
///
/// [split]
/// train_fraction = 0.8
///
/// [generator]
/// kind = "vae"
/// mode = "rhvae"
/// scheme = "metric-volume"
///
/// [classifier]
/// kind = "mlp"
/// hidden = 400
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPlan {
    pub composition: Composition,
    pub samples_per_class: usize,
    pub repetitions: usize,
    /// Root seed: generators use it directly, classifier run `r` uses `seed + r`.
    pub seed: u64,
    pub split: SplitSpec,
    pub generator: GeneratorSpec,
    pub classifier: ClassifierSpec,
    /// Also compute GAN-train / GAN-test.
    pub gan_scores: bool,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self {
            composition: Composition::BaselinePlusSynthetic,
            samples_per_class: 200,
            repetitions: 5,
            seed: 0,
            split: SplitSpec::default(),
            generator: GeneratorSpec::default(),
            classifier: ClassifierSpec::default(),
            gan_scores: false,
        }
    }
}

impl AugmentationPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.samples_per_class == 0 && self.composition != Composition::BaselineOnly {
            return Err(Error::Config("samples_per_class must be >= 1".into()));
        }
        if let ClassifierSpec::Knn { k: 0 } = self.classifier {
            return Err(Error::Config("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// One classifier run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// `None` when the run failed; see `note`.
    pub metrics: Option<Metrics>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: Option<Stat>,
    pub balanced_accuracy: Option<Stat>,
    pub sensitivity: Option<Stat>,
    pub specificity: Option<Stat>,
}

impl Summary {
    pub fn of(runs: &[RunRecord]) -> Self {
        let ok: Vec<&Metrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let pick = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<Stat> {
            let v: Option<Vec<f64>> = ok.iter().map(|m| f(m)).collect();
            v.and_then(|v| Stat::of(&v))
        };
        Self {
            accuracy: pick(&|m| Some(m.accuracy)),
            balanced_accuracy: pick(&|m| Some(m.balanced_accuracy)),
            sensitivity: pick(&|m| m.sensitivity),
            specificity: pick(&|m| m.specificity),
        }
    }
}

/// Accuracy statistics for the GAN-train / GAN-test protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanScores {
    /// Train on real, test on real.
    pub baseline: Option<Stat>,
    /// Train on generated, test on real.
    pub gan_train: Option<Stat>,
    /// Train on real, test on generated.
    pub gan_test: Option<Stat>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub composition: Composition,
    pub generator: String,
    pub classifier: String,
    pub train_size: usize,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
    pub gan: Option<GanScores>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn fmt_stat(s: &Option<Stat>) -> String {
    s.map_or("-".to_string(), |s| s.to_string())
}

impl AugmentationReport {
    /// `run,seed,accuracy,balanced_accuracy,sensitivity,specificity,note`
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("run,seed,accuracy,balanced_accuracy,sensitivity,specificity,note\n");
        for r in &self.runs {
            let m = r.metrics.as_ref();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.run,
                r.seed,
                fmt_opt(m.map(|m| m.accuracy)),
                fmt_opt(m.map(|m| m.balanced_accuracy)),
                fmt_opt(m.and_then(|m| m.sensitivity)),
                fmt_opt(m.and_then(|m| m.specificity)),
                r.note.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:<18} {:<8} {:>7}  {:<14} {:<14} {:<14} {:<14}",
            "composition", "generator", "model", "n_train", "accuracy", "balanced acc.", "sensitivity", "specificity"
        );
        let _ = writeln!(
            s,
            "{:<20} {:<18} {:<8} {:>7}  {:<14} {:<14} {:<14} {:<14}",
            self.composition.to_string(),
            self.generator,
            self.classifier,
            self.train_size,
            fmt_stat(&self.summary.accuracy),
            fmt_stat(&self.summary.balanced_accuracy),
            fmt_stat(&self.summary.sensitivity),
            fmt_stat(&self.summary.specificity)
        );
        let failed: Vec<&RunRecord> = self.runs.iter().filter(|r| r.metrics.is_none()).collect();
        if !failed.is_empty() {
            let _ = writeln!(s, "\n{} of {} runs excluded:", failed.len(), self.runs.len());
            for r in failed {
                let _ = writeln!(s, "  run {} (seed {}): {}", r.run, r.seed, r.note.as_deref().unwrap_or("failed"));
            }
        }
        if let Some(g) = &self.gan {
            let _ = writeln!(
                s,
                "\nbaseline {}   GAN-train {}   GAN-test {}",
                fmt_stat(&g.baseline),
                fmt_stat(&g.gan_train),
                fmt_stat(&g.gan_test)
            );
            for n in &g.notes {
                let _ = writeln!(s, "  note: {n}");
            }
        }
        s
    }

    /// Writes `<stem>-runs.csv`, `<stem>-report.txt` and `<stem>-report.json`
    /// into `dir`, returning their paths.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}-runs.csv"));
        let txt = dir.join(format!("{stem}-report.txt"));
        let json = dir.join(format!("{stem}-report.json"));
        std::fs::write(&csv, self.runs_csv())?;
        std::fs::write(&txt, self.table())?;
        std::fs::write(&json, serde_json::to_string_pretty(self).map_err(|e| Error::Usage(e.to_string()))?)?;
        Ok(vec![csv, txt, json])
    }
}

/// Fits `trainer` on `train_set` with seeds `seed, seed + 1, ...` and scores on
/// `test`. Failed runs are kept with a note and left out of the summary.
pub fn repeated_runs(
    trainer: &dyn Trainer,
    train_set: &ImageDataset,
    val: &ImageDataset,
    test: &ImageDataset,
    repetitions: usize,
    seed: u64,
    jobs: usize,
) -> Vec<RunRecord> {
    let runs: Vec<usize> = (0..repetitions).collect();
    par_map(&runs, jobs, |&run| {
        let s = seed.wrapping_add(run as u64);
        let outcome = trainer
            .fit(train_set, val, s)
            .and_then(|c| c.predict(&test.features()))
            .and_then(|p| score(&p, &test.labels));
        match outcome {
            Ok(m) => RunRecord {
                run,
                seed: s,
                metrics: Some(m),
                note: None,
            },
            Err(e) => {
                log::warn!("classifier run {run} failed: {e}");
                RunRecord {
                    run,
                    seed: s,
                    metrics: None,
                    note: Some(e.to_string()),
                }
            }
        }
    })
}

/// Classifier set for `composition`.
pub fn compose(composition: Composition, baseline: &ImageDataset, synthetic: Option<&ImageDataset>) -> Result<ImageDataset> {
    let need = || Error::Usage(format!("{composition} needs synthetic data"));
    Ok(match composition {
        Composition::BaselineOnly => baseline.clone(),
        Composition::SyntheticOnly => synthetic.ok_or_else(need)?.clone(),
        Composition::BaselinePlusSynthetic => ImageDataset::concat(&[baseline, synthetic.ok_or_else(need)?])?,
    })
}

/// GAN-train / GAN-test accuracies over `repetitions` seeded runs.
#[allow(clippy::too_many_arguments)]
pub fn gan_scores(
    train_set: &ImageDataset,
    val: &ImageDataset,
    test: &ImageDataset,
    generated: &ImageDataset,
    trainer: &dyn Trainer,
    repetitions: usize,
    seed: u64,
    jobs: usize,
) -> Result<GanScores> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    let tags = [&train_set.provenance, &test.provenance, &generated.provenance];
    if tags[0] == tags[1] || tags[0] == tags[2] || tags[1] == tags[2] {
        return Err(Error::Usage(format!(
            "train, test and generated sets must differ in provenance, got {tags:?}"
        )));
    }
    let mut notes = Vec::new();
    let mut stat = |name: &str, runs: Vec<RunRecord>| -> Option<Stat> {
        let acc: Vec<f64> = runs.iter().filter_map(|r| r.metrics.map(|m| m.accuracy)).collect();
        if acc.len() < runs.len() {
            notes.push(format!("{name}: {} of {} runs failed and were excluded", runs.len() - acc.len(), runs.len()));
        }
        Stat::of(&acc)
    };
    let baseline = stat("baseline", repeated_runs(trainer, train_set, val, test, repetitions, seed, jobs));
    let gan_train = stat("GAN-train", repeated_runs(trainer, generated, val, test, repetitions, seed, jobs));
    let gan_test = stat("GAN-test", repeated_runs(trainer, train_set, val, generated, repetitions, seed, jobs));
    Ok(GanScores {
        baseline,
        gan_train,
        gan_test,
        notes,
    })
}

/// Splits `data` per the plan, fits per-class generators on the training part
/// only, composes the classifier set and scores repeated runs on `test`.
pub fn run_plan(plan: &AugmentationPlan, data: &ImageDataset, test: &ImageDataset, jobs: usize) -> Result<AugmentationReport> {
    plan.validate()?;
    let (train_set, val) = split(data, &plan.split)?;
    let synthetic = if plan.composition != Composition::BaselineOnly || plan.gan_scores {
        let gens = fit_generators(&plan.generator, &train_set, plan.seed, jobs)?;
        Some(synthesize(&gens, plan.samples_per_class, plan.seed)?)
    } else {
        None
    };
    let set = compose(plan.composition, &train_set, synthetic.as_ref())?;
    let runs = repeated_runs(&plan.classifier, &set, &val, test, plan.repetitions, plan.seed, jobs);
    let gan = match (&synthetic, plan.gan_scores) {
        (Some(s), true) => Some(gan_scores(
            &train_set,
            &val,
            test,
            s,
            &plan.classifier,
            plan.repetitions,
            plan.seed,
            jobs,
        )?),
        _ => None,
    };
    Ok(AugmentationReport {
        composition: plan.composition,
        generator: if plan.composition == Composition::BaselineOnly {
            "-".into()
        } else {
            plan.generator.name()
        },
        classifier: plan.classifier.name(),
        train_size: set.len(),
        summary: Summary::of(&runs),
        runs,
        gan,
    })
}
