use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification scores in percent. Sensitivity and specificity exist only
/// for two classes, with class 1 positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean of the per-class recalls over classes present in the truth.
    pub balanced_accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn score(predicted: &[usize], truth: &[usize]) -> Result<Metrics> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Usage(format!(
            "scoring needs equal, nonempty label lists (got {} and {})",
            predicted.len(),
            truth.len()
        )));
    }
    let classes = truth.iter().chain(predicted).max().map_or(0, |m| m + 1);
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        total[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let accuracy = 100.0 * hit.iter().sum::<usize>() as f64 / truth.len() as f64;
    let recalls: Vec<f64> = hit
        .iter()
        .zip(&total)
        .filter(|(_, &n)| n > 0)
        .map(|(&h, &n)| h as f64 / n as f64)
        .collect();
    let balanced_accuracy = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
    let binary = classes <= 2 && total.iter().take(2).all(|&n| n > 0);
    let recall = |c: usize| 100.0 * hit[c] as f64 / total[c] as f64;
    Ok(Metrics {
        accuracy,
        balanced_accuracy,
        sensitivity: binary.then(|| recall(1)),
        specificity: binary.then(|| recall(0)),
    })
}

/// Mean and sample standard deviation; `sd` needs at least two values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, sd, n })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.sd {
            Some(sd) => write!(f, "{:.1} ± {:.1}", self.mean, sd),
            None => write!(f, "{:.1}", self.mean),
        }
    }
}
