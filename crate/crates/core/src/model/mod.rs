//! The geometry-aware VAE: encoder, Bernoulli decoder, metric network and the
//! Riemannian Hamiltonian flow that refines posterior samples.

mod checkpoint;
mod elbo;
mod likelihood;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use elbo::{elbo_terms, objective_gradients, ElboNoise, ElboTerms, MetricInput};
pub use likelihood::{
    estimate_log_likelihood, log_importance_weight, log_mean_exp, DiagGaussian, LikelihoodEstimate,
};
pub use train::{train, EpochRecord, TrainConfig, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FixedPoint, FlowConfig};
use crate::error::{Error, Result};
use crate::metric::{MetricField, MetricNetwork};
use crate::numcore::{Activation, Dense, Mlp, Tensor};
use crate::scalar::Scalar;

/// Which posterior refinement the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No flow (`K = 0`).
    Vae,
    /// Hamiltonian flow with the identity metric.
    Hvae,
    /// Hamiltonian flow with the learned metric.
    Rhvae,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vae => "vae",
            Mode::Hvae => "hvae",
            Mode::Rhvae => "rhvae",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vae" => Ok(Mode::Vae),
            "hvae" => Ok(Mode::Hvae),
            "rhvae" => Ok(Mode::Rhvae),
            other => Err(Error::Config(format!("unknown mode `{other}` (vae, hvae, rhvae)"))),
        }
    }
}

/// Architecture and flow hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Leapfrog steps `K`.
    pub steps: usize,
    pub step_size: f64,
    /// Kernel temperature `T`.
    pub temperature: f64,
    /// Metric floor `lambda`.
    pub lambda: f64,
    /// Initial tempering `beta0` (not its square root).
    pub beta0: f64,
    pub fixed_point_iters: usize,
}

impl ModelConfig {
    /// `d = 2, K = 3, eps = 1e-2, T = 0.8, lambda = 1e-3, sqrt(beta0) = 0.3`.
    pub fn shapes_preset(input_dim: usize) -> Self {
        Self {
            mode: Mode::Rhvae,
            input_dim,
            latent_dim: 2,
            hidden: 400,
            steps: 3,
            step_size: 1e-2,
            temperature: 0.8,
            lambda: 1e-3,
            beta0: 0.3 * 0.3,
            fixed_point_iters: 3,
        }
    }

    /// Same hyperparameters in another mode; VAE mode drops the flow.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        if mode == Mode::Vae {
            self.steps = 0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return bad("input, latent and hidden sizes must be positive".into());
        }
        if self.mode == Mode::Vae && self.steps != 0 {
            return bad(format!("vae mode needs steps = 0, got {}", self.steps));
        }
        if !(self.step_size > 0.0) || !(self.temperature > 0.0) || !(self.lambda > 0.0) {
            return bad("step_size, temperature and lambda must be > 0".into());
        }
        if !(self.beta0 > 0.0 && self.beta0 <= 1.0) {
            return bad(format!("beta0 must lie in (0, 1], got {}", self.beta0));
        }
        if self.fixed_point_iters == 0 {
            return bad("fixed_point_iters must be >= 1".into());
        }
        Ok(())
    }

    /// Training-time flow, or `None` when `K = 0`.
    pub fn flow<T: Scalar>(&self) -> Result<Option<FlowConfig<T>>> {
        if self.steps == 0 {
            return Ok(None);
        }
        FlowConfig::new(
            self.steps,
            T::lit(self.step_size),
            T::lit(self.beta0),
            FixedPoint::fixed(self.fixed_point_iters),
        )
        .map(Some)
    }
}

/// `x -> (mu, log sigma^2)` through a shared trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub trunk: Mlp<T>,
    pub mean: Dense<T>,
    pub log_var: Dense<T>,
}

impl<T: Scalar> Encoder<T> {
    fn new<R: Rng + ?Sized>(input: usize, hidden: usize, latent: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            trunk: Mlp::new(&[input, hidden], &[Activation::Relu], rng)?,
            mean: Dense::init(hidden, latent, Activation::Linear, rng),
            log_var: Dense::init(hidden, latent, Activation::Linear, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.trunk.forward(x)?;
        let mu = h.matmul(&self.mean.weight)?.add(&self.mean.bias)?;
        let lv = h.matmul(&self.log_var.weight)?.add(&self.log_var.bias)?;
        Ok((mu, lv))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhvaeModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    /// `z -> pi(z)` with sigmoid output.
    pub decoder: Mlp<T>,
    /// Present in RHVAE mode only.
    pub metric_net: Option<MetricNetwork<T>>,
    /// Frozen metric; empty until trained.
    pub field: MetricField<T>,
}

impl<T: Scalar> RhvaeModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (dd, h, d) = (config.input_dim, config.hidden, config.latent_dim);
        let encoder = Encoder::new(dd, h, d, rng)?;
        let decoder = Mlp::new(&[d, h, dd], &[Activation::Relu, Activation::Sigmoid], rng)?;
        let metric_net = match config.mode {
            Mode::Rhvae => Some(MetricNetwork::new(dd, h, d, rng)?),
            _ => None,
        };
        let field = Self::empty_field(&config)?;
        Ok(Self {
            config,
            encoder,
            decoder,
            metric_net,
            field,
        })
    }

    fn empty_field(config: &ModelConfig) -> Result<MetricField<T>> {
        match config.mode {
            Mode::Rhvae => MetricField::empty(config.latent_dim, T::lit(config.temperature), T::lit(config.lambda)),
            // HVAE's metric is the identity: lambda = 1 and no kernels
            _ => MetricField::empty(config.latent_dim, T::one(), T::one()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// `(mu, log sigma^2)` for each row of `x`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.encoder.forward(x)
    }

    /// Bernoulli means `pi(z)` for each row of `z`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.forward(z)
    }

    /// Every trainable tensor in checkpoint order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.encoder.trunk.params();
        p.extend([
            &self.encoder.mean.weight,
            &self.encoder.mean.bias,
            &self.encoder.log_var.weight,
            &self.encoder.log_var.bias,
        ]);
        p.extend(self.decoder.params());
        if let Some(m) = &self.metric_net {
            p.extend(m.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.encoder.trunk.params_mut();
        p.extend([
            &mut self.encoder.mean.weight,
            &mut self.encoder.mean.bias,
            &mut self.encoder.log_var.weight,
            &mut self.encoder.log_var.bias,
        ]);
        p.extend(self.decoder.params_mut());
        if let Some(m) = &mut self.metric_net {
            p.extend(m.params_mut());
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.trunk.param_names("encoder.trunk");
        n.extend(
            ["encoder.mean.weight", "encoder.mean.bias", "encoder.log_var.weight", "encoder.log_var.bias"]
                .map(String::from),
        );
        n.extend(self.decoder.param_names("decoder"));
        if let Some(m) = &self.metric_net {
            n.extend(m.param_names("metric"));
        }
        n
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Rebuilds the metric from the training set: `c_i = mu(x_i)`, `L_i = m(x_i)`.
    /// No-op outside RHVAE mode.
    pub fn refresh_field(&mut self, x: &Tensor<T>) -> Result<()> {
        let Some(net) = &self.metric_net else {
            return Ok(());
        };
        let (mu, _) = self.encode(x)?;
        let l = net.forward(x)?;
        self.field = MetricField::new(
            self.config.latent_dim,
            mu.into_data(),
            l.into_data(),
            T::lit(self.config.temperature),
            T::lit(self.config.lambda),
        )?;
        Ok(())
    }
}

/// `z = mu + exp(log_var / 2) * noise`, row by row.
pub fn reparam_sample<T: Scalar>(mu: &Tensor<T>, log_var: &Tensor<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    let sd = log_var.map(|v| (v / T::lit(2.0)).exp());
    mu.add(&sd.mul(noise)?)
}
