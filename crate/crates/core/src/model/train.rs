use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::elbo::{build, ElboNoise, ElboTerms, MetricInput, ModelVars};
use super::RhvaeModel;
use crate::error::{Error, Result};
use crate::metric::MetricField;
use crate::numcore::{linalg, AdamState, Graph, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs without an ELBO improvement before stopping.
    pub patience: usize,
    /// `None` trains on the whole set at once.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub seed: u64,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            patience: 20,
            batch_size: None,
            max_epochs: 1000,
            seed: 0,
            clip_norm: Some(1e3),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dataset means for one epoch: `elbo = recon - kl`. Rows whose implicit
/// leapfrog iterations did not contract are left out of the means and the
/// gradient, and counted in `dropped`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    /// `log p(x | z_K)`
    pub recon: f64,
    /// Everything else in the objective, negated.
    pub kl: f64,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_elbo: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,elbo,recon,kl,dropped\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.elbo, r.recon, r.kl, r.dropped));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Stored centroids and factors for every training point.
struct Stored<T> {
    centroids: Tensor<T>,
    factors: Tensor<T>,
}

impl<T: Scalar> Stored<T> {
    fn others(&self, batch: &[usize], n: usize) -> Option<(Tensor<T>, Tensor<T>)> {
        if batch.len() == n {
            return None;
        }
        let mut in_batch = vec![false; n];
        for &i in batch {
            in_batch[i] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !in_batch[i]).collect();
        Some((self.centroids.select_rows(&rest), self.factors.select_rows(&rest)))
    }

    fn update(&mut self, batch: &[usize], mu: &Tensor<T>, factors: &Tensor<T>) {
        let d = mu.cols();
        let c = self.centroids.data_mut();
        for (r, &i) in batch.iter().enumerate() {
            c[i * d..(i + 1) * d].copy_from_slice(mu.row(r));
        }
        let dd = d * d;
        let fd = self.factors.data_mut();
        for (r, &i) in batch.iter().enumerate() {
            fd[i * dd..(i + 1) * dd].copy_from_slice(&factors.data()[r * dd..(r + 1) * dd]);
        }
    }
}

struct StepOutcome<T> {
    log_weight: f64,
    log_lik: f64,
    kept: usize,
    mu: Tensor<T>,
    factors: Option<Tensor<T>>,
}

fn batch_step<T: Scalar>(
    model: &mut RhvaeModel<T>,
    adam: &mut AdamState<T>,
    names: &[String],
    x: &Tensor<T>,
    noise: &ElboNoise<T>,
    others: Option<(&Tensor<T>, &Tensor<T>)>,
    clip_norm: Option<f64>,
) -> std::result::Result<StepOutcome<T>, (Error, Option<String>)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, model, true);
    let xv = g.constant(x.clone());
    let terms = build(&mut g, model, &vars, xv, noise, MetricInput::Live { others }).map_err(|e| (e, None))?;
    let keep: Vec<bool> = terms.unsettled.iter().map(|&u| !u).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        let detail = diagnose(&g, model, x, &terms, others);
        return Err((Error::Numerical("no row's leapfrog iterations contracted".into()), Some(detail)));
    }
    let masked_sum = |t: &Tensor<T>| -> f64 {
        t.data()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v.to_f64_lossy())
            .sum()
    };
    let total = masked_sum(g.value(terms.log_weight));
    if !total.is_finite() {
        let detail = diagnose(&g, model, x, &terms, others);
        return Err((Error::Numerical("non-finite ELBO".into()), Some(detail)));
    }
    let objective = if kept == x.rows() {
        g.mean(terms.log_weight)
    } else {
        let w: Vec<T> = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        let w = g.constant(Tensor::new(g.shape(terms.log_weight), w).map_err(|e| (e, None))?);
        let lw = g.mul(terms.log_weight, w).map_err(|e| (e, None))?;
        let s = g.sum(lw);
        g.scale(s, T::one() / T::from_usize(kept).unwrap())
    };
    let loss = g.neg(objective);
    let grads = g.backward(loss).map_err(|e| (e, None))?;
    let mut grads: Vec<Tensor<T>> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
    if let Some(c) = clip_norm {
        let norm = grads.iter().map(|t| t.dot(t)).sum::<T>().sqrt();
        if norm > T::lit(c) {
            let s = T::lit(c) / norm;
            grads.iter_mut().for_each(|t| *t = t.scale(s));
        }
    }
    let out = StepOutcome {
        log_weight: total,
        log_lik: masked_sum(g.value(terms.log_lik)),
        kept,
        mu: g.value(terms.mu).clone(),
        factors: terms.factors.map(|f| g.value(f).clone()),
    };
    if let Err(e) = adam.step(&mut model.params_mut(), &grads, names) {
        let detail = diagnose(&g, model, x, &terms, others);
        return Err((e, Some(detail)));
    }
    Ok(out)
}

/// Energy change over the flow and the smallest eigenvalue of `G^{-1}(z_0)`
/// across the batch, for divergence reports.
fn diagnose<T: Scalar>(
    g: &Graph<T>,
    model: &RhvaeModel<T>,
    x: &Tensor<T>,
    terms: &ElboTerms,
    others: Option<(&Tensor<T>, &Tensor<T>)>,
) -> String {
    let d = model.latent_dim();
    let field = match terms.factors {
        Some(f) => {
            let mut c = g.value(terms.mu).data().to_vec();
            let mut l = g.value(f).data().to_vec();
            if let Some((oc, of)) = others {
                c.extend_from_slice(oc.data());
                l.extend_from_slice(of.data());
            }
            MetricField::new(d, c, l, T::lit(model.config.temperature), T::lit(model.config.lambda))
        }
        None => Ok(model.field.clone()),
    };
    let mut msg = Vec::new();
    let bad = g.value(terms.log_weight).data().iter().filter(|v| !v.is_finite()).count();
    msg.push(format!("{bad} of {} rows non-finite", x.rows()));
    if let Some(ginv) = terms.inverse_metric_start {
        let min_eig = g
            .value(ginv)
            .data()
            .chunks(d * d)
            .map(|m| linalg::symmetric_eigenvalues(m, d)[0].to_f64_lossy())
            .fold(f64::INFINITY, f64::min);
        msg.push(format!("min eigenvalue of G^-1 at z0 = {min_eig:.3e}"));
    }
    if let (Ok(field), Some(v0), Some(vk)) = (field, terms.v0, terms.v_end) {
        let energy = |z: &[T], v: &[T], xr: &[T]| -> f64 {
            let Ok(zt) = Tensor::new(&[1, d], z.to_vec()) else {
                return f64::NAN;
            };
            let Ok(p) = model.decode(&zt) else {
                return f64::NAN;
            };
            let tiny = T::lit(1e-300);
            let ll: T = p
                .data()
                .iter()
                .zip(xr)
                .map(|(&pi, &xi)| xi * (pi + tiny).ln() + (T::one() - xi) * (T::one() - pi + tiny).ln())
                .sum();
            let u = -ll + z.iter().map(|&a| a * a).sum::<T>() / T::lit(2.0);
            match field.evaluate(z) {
                Ok(e) => {
                    let k = (-e.logdet_inverse + linalg::quad_form(&e.inverse_metric, v)) / T::lit(2.0);
                    (u + k).to_f64_lossy()
                }
                Err(_) => f64::NAN,
            }
        };
        let (z0, zk) = (g.value(terms.z0), g.value(terms.z_end));
        let (v0, vk) = (g.value(v0), g.value(vk));
        let mut worst = 0.0f64;
        let mut any_nan = false;
        for r in 0..x.rows() {
            let dh = energy(zk.row(r), vk.row(r), x.row(r)) - energy(z0.row(r), v0.row(r), x.row(r));
            if dh.is_finite() {
                worst = worst.max(dh.abs());
            } else {
                any_nan = true;
            }
        }
        msg.push(format!(
            "max |dH| over the flow = {worst:.3e}{}",
            if any_nan { " (some rows non-finite)" } else { "" }
        ));
    }
    msg.join("; ")
}

/// Fits `model` to the rows of `x` with Adam on the negative objective,
/// keeping the parameters of the best epoch. The metric field is rebuilt
/// from the whole training set at the end.
pub fn train<T: Scalar>(model: &mut RhvaeModel<T>, x: &Tensor<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::Insufficient("training needs a nonempty [N, D] dataset".into()));
    }
    if x.cols() != model.input_dim() {
        return Err(Error::shape("train input", x.shape(), &[x.rows(), model.input_dim()]));
    }
    let n = x.rows();
    let d = model.latent_dim();
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = model.param_names();
    let mut adam = AdamState::for_params(&model.params(), T::lit(cfg.learning_rate));

    // c_i = 0 to start; factors from the untrained network
    let mut stored = match &model.metric_net {
        Some(net) => Some(Stored {
            centroids: Tensor::zeros(&[n, d]),
            factors: net.forward(x)?,
        }),
        None => None,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut snapshot: Vec<Tensor<T>> = model.params().into_iter().cloned().collect();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let (mut sum_w, mut sum_ll, mut kept) = (0.0, 0.0, 0);
        for idx in order.chunks(batch) {
            let xb = if batch == n { x.clone() } else { x.select_rows(idx) };
            let noise = ElboNoise::draw(&mut rng, idx.len(), d);
            let others = stored.as_ref().and_then(|s| s.others(idx, n));
            let others_ref = others.as_ref().map(|(c, f)| (c, f));
            let out = batch_step(model, &mut adam, &names, &xb, &noise, others_ref, cfg.clip_norm).map_err(|(e, detail)| {
                match (e, detail) {
                    (e @ (Error::Integration { .. } | Error::NonFiniteGradient { .. } | Error::Numerical(_)), detail) => {
                        Error::Divergence {
                            epoch,
                            detail: match detail {
                                Some(d) => format!("{e}; {d}"),
                                None => e.to_string(),
                            },
                        }
                    }
                    (e, _) => e,
                }
            })?;
            sum_w += out.log_weight;
            sum_ll += out.log_lik;
            kept += out.kept;
            if let (Some(s), Some(f)) = (stored.as_mut(), out.factors.as_ref()) {
                s.update(idx, &out.mu, f);
            }
        }
        let rec = EpochRecord {
            epoch,
            elbo: sum_w / kept as f64,
            recon: sum_ll / kept as f64,
            kl: (sum_ll - sum_w) / kept as f64,
            dropped: n - kept,
        };
        if rec.dropped > 0 {
            log::debug!("epoch {epoch}: {} rows dropped", rec.dropped);
        }
        log::debug!("epoch {epoch}: elbo {:.4} recon {:.4}", rec.elbo, rec.recon);
        trace.push(rec);
        if rec.elbo > best.0 {
            best = (rec.elbo, epoch);
            for (s, p) in snapshot.iter_mut().zip(model.params()) {
                s.data_mut().copy_from_slice(p.data());
            }
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    for (p, s) in model.params_mut().into_iter().zip(&snapshot) {
        p.data_mut().copy_from_slice(s.data());
    }
    model.refresh_field(x)?;
    log::info!("best elbo {:.4} at epoch {} of {}", best.0, best.1, trace.len());
    Ok(TrainReport {
        trace,
        best_epoch: best.1,
        best_elbo: best.0,
        stopped_early,
    })
}
