use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::numcore::{Activation, AdamState, Graph, Mlp, Tensor};

/// A fitted classifier over flattened images.
pub trait Classifier: Send + Sync {
    fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>>;
}

/// Something that fits a [`Classifier`]; external classifiers plug in here.
pub trait Trainer: Send + Sync {
    fn name(&self) -> String;
    fn fit(&self, train: &ImageDataset, val: &ImageDataset, seed: u64) -> Result<Box<dyn Classifier>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 400,
            learning_rate: 1e-3,
            patience: 20,
            max_epochs: 500,
            batch_size: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClassifierSpec {
    Mlp(MlpConfig),
    Knn { k: usize },
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec::Mlp(MlpConfig::default())
    }
}

impl Trainer for ClassifierSpec {
    fn name(&self) -> String {
        match self {
            ClassifierSpec::Mlp(c) => format!("mlp-{}", c.hidden),
            ClassifierSpec::Knn { k } => format!("{k}-nn"),
        }
    }

    fn fit(&self, train: &ImageDataset, val: &ImageDataset, seed: u64) -> Result<Box<dyn Classifier>> {
        Ok(match self {
            ClassifierSpec::Mlp(c) => Box::new(fit_mlp(train, val, c, seed)?),
            ClassifierSpec::Knn { k } => Box::new(Knn::fit(train, *k)?),
        })
    }
}

pub struct MlpClassifier {
    pub net: Mlp<f64>,
    pub epochs: usize,
    pub best_val_loss: f64,
}

impl Classifier for MlpClassifier {
    fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        let logits = self.net.forward(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    // first maximum wins
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * classes + l] = 1.0;
    }
    t
}

/// Mean softmax cross-entropy of `net` on `(x, labels)`.
pub fn cross_entropy(net: &Mlp<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let logits = net.forward(x)?;
    let c = logits.cols();
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        if l >= c {
            return Err(Error::Usage(format!("label {l} outside {c} classes")));
        }
        total += lse - row[l];
    }
    Ok(total / labels.len() as f64)
}

/// One hidden ReLU layer, softmax cross-entropy, Adam, early stopping on the
/// validation loss. The returned network has the best validation loss.
pub fn fit_mlp(train: &ImageDataset, val: &ImageDataset, cfg: &MlpConfig, seed: u64) -> Result<MlpClassifier> {
    if train.is_empty() {
        return Err(Error::Usage("cannot fit a classifier on an empty set".into()));
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(format!("bad MLP config {cfg:?}")));
    }
    let classes = train.num_classes().max(val.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(
        &[train.dim(), cfg.hidden, classes],
        &[Activation::Relu, Activation::Linear],
        &mut rng,
    )?;
    let names = net.param_names("mlp");
    let mut adam = AdamState::for_params(&net.params(), cfg.learning_rate);
    let x = train.features::<f64>();
    let xv = val.features::<f64>();
    // without validation data the training loss is monitored instead
    let monitor = |net: &Mlp<f64>| {
        if val.is_empty() {
            cross_entropy(net, &x, &train.labels)
        } else {
            cross_entropy(net, &xv, &val.labels)
        }
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (monitor(&net)?, 0, net.clone());
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let vars = net.bind(&mut g, true);
            let xb = g.constant(x.select_rows(idx));
            let logits = net.forward_graph(&mut g, &vars, xb)?;
            let logp = g.log_softmax(logits)?;
            let target = g.constant(one_hot(&labels, classes));
            let picked = g.mul(logp, target)?;
            let s = g.sum(picked);
            let loss = g.scale(s, -1.0 / idx.len() as f64);
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor<f64>> = vars
                .iter()
                .flat_map(|v| [grads.wrt(v.weight), grads.wrt(v.bias)])
                .collect();
            adam.step(&mut net.params_mut(), &grads, &names).map_err(|e| Error::Divergence {
                epoch,
                detail: e.to_string(),
            })?;
        }
        let loss = monitor(&net)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "non-finite validation loss".into(),
            });
        }
        if loss < best.0 {
            best = (loss, epoch, net.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    log::debug!("mlp: best val loss {:.4} at epoch {} of {epochs}", best.0, best.1);
    Ok(MlpClassifier {
        net: best.2,
        epochs,
        best_val_loss: best.0,
    })
}

/// Majority vote among the `k` nearest training images (Euclidean). A tie
/// between classes goes to the tied class whose member is nearest.
pub struct Knn {
    k: usize,
    points: Tensor<f64>,
    labels: Vec<usize>,
}

impl Knn {
    pub fn fit(train: &ImageDataset, k: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Usage("cannot fit a classifier on an empty set".into()));
        }
        if k == 0 || k > train.len() {
            return Err(Error::Config(format!("k = {k} must lie in 1..={}", train.len())));
        }
        Ok(Self {
            k,
            points: train.features(),
            labels: train.labels.clone(),
        })
    }

    fn classify(&self, q: &[f64]) -> usize {
        let mut d: Vec<(f64, usize)> = (0..self.points.rows())
            .map(|i| {
                let p = self.points.row(i);
                (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), i)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &d[..self.k];
        let classes = self.labels.iter().max().map_or(0, |m| m + 1);
        let mut votes = vec![0usize; classes];
        for &(_, i) in near {
            votes[self.labels[i]] += 1;
        }
        let top = *votes.iter().max().expect("k >= 1");
        near.iter()
            .map(|&(_, i)| self.labels[i])
            .find(|&c| votes[c] == top)
            .expect("a neighbour carries the top vote")
    }
}

impl Classifier for Knn {
    fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        if x.rank() != 2 || x.cols() != self.points.cols() {
            return Err(Error::shape("knn predict", x.shape(), self.points.shape()));
        }
        Ok((0..x.rows()).map(|r| self.classify(x.row(r))).collect())
    }
}
