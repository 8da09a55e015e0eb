//! Augmentation experiments: per-class generators, synthetic-set assembly,
//! a small classifier bank and the usual classification scores.

pub mod augment;
pub mod classify;
pub mod generators;
pub mod metrics;
pub mod plan;

pub use augment::{simple_augment, AugmentOp, AugmentParams};
pub use classify::{fit_mlp, Classifier, ClassifierSpec, Knn, MlpClassifier, MlpConfig, Trainer};
pub use generators::{check_generator_input, fit_generators, synthesize, ClassGenerator, GeneratorSpec};
pub use metrics::{score, Metrics, Stat};
pub use plan::{
    compose, gan_scores, repeated_runs, run_plan, AugmentationPlan, AugmentationReport, Composition, GanScores,
    RunRecord, Summary,
};

/// Maps `f` over `items` on at most `jobs` threads, keeping input order.
pub(crate) fn par_map<I: Sync, R: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let f = &f;
    let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                s.spawn(move || {
                    (w..items.len())
                        .step_by(jobs)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    out.sort_by_key(|p| p.0);
    out.into_iter().map(|p| p.1).collect()
}
