//! Mean-field Gaussian Bayesian networks trained on the variational free
//! energy with reparameterized weight samples.
//!
//! Each weight and bias has a posterior `N(mu, softplus(rho)^2)` and a
//! prior `N(0, prior_std^2)`. A training step draws unit-normal noise,
//! forms `w = mu + softplus(rho) * eps`, and backpropagates the
//! likelihood through the sampled network.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nncore::{
    backward_layers, check_input, fit, forward_layers, forward_output, sigmoid, softplus, DenseLayer, HeadKind,
    HeadOutput, Loss, Modifiers, Network, NetworkSpec, StepContext, TrainConfig, TrainHistory, Trainable, TrainingData,
};
use crate::predictive::{monte_carlo, PredictiveDistribution};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnConfig {
    pub prior_std: f64,
    /// Initial posterior std as a fraction of `prior_std`.
    pub init_std_fraction: f64,
    /// Weight draws per training step.
    pub mc_samples: usize,
    /// Multiplier on the complexity cost; 0 gives maximum likelihood.
    pub kl_weight_scale: f64,
    /// Keep posterior stds at their initial value.
    pub freeze_std: bool,
}

impl Default for BnnConfig {
    fn default() -> Self {
        BnnConfig {
            prior_std: 1.0,
            init_std_fraction: 0.05,
            mc_samples: 1,
            kl_weight_scale: 1.0,
            freeze_std: false,
        }
    }
}

impl BnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::Parameter("prior_std must be positive".into()));
        }
        if !(self.init_std_fraction > 0.0 && self.init_std_fraction.is_finite()) {
            return Err(Error::Parameter("init_std_fraction must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Parameter("mc_samples must be at least 1".into()));
        }
        if !(self.kl_weight_scale >= 0.0) {
            return Err(Error::Parameter("kl_weight_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Inverse of softplus.
pub fn softplus_inverse(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// `KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))`.
pub fn kl_gaussian(mu_q: f64, s_q: f64, mu_p: f64, s_p: f64) -> Result<f64> {
    if !(s_q > 0.0 && s_p > 0.0) {
        return Err(Error::Parameter("KL needs positive standard deviations".into()));
    }
    Ok(kl_unchecked(mu_q, s_q, mu_p, s_p))
}

#[inline]
fn kl_unchecked(mu_q: f64, s_q: f64, mu_p: f64, s_p: f64) -> f64 {
    let d = mu_q - mu_p;
    (s_p / s_q).ln() + (s_q * s_q + d * d) / (2.0 * s_p * s_p) - 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_mu: Vec<f64>,
    pub w_rho: Vec<f64>,
    pub b_mu: Vec<f64>,
    pub b_rho: Vec<f64>,
}

/// Unit-normal draws for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerNoise {
    pub fn draw(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        LayerNoise {
            weights: (0..fan_in * fan_out).map(|_| rng.sample(StandardNormal)).collect(),
            biases: (0..fan_out).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

impl VariationalLayer {
    pub fn from_dense(layer: &DenseLayer, init_std: f64) -> Self {
        let rho = softplus_inverse(init_std);
        VariationalLayer {
            fan_in: layer.fan_in,
            fan_out: layer.fan_out,
            w_mu: layer.weights.clone(),
            w_rho: vec![rho; layer.weights.len()],
            b_mu: layer.biases.clone(),
            b_rho: vec![rho; layer.biases.len()],
        }
    }

    pub fn w_std(&self) -> Vec<f64> {
        self.w_rho.iter().map(|r| softplus(*r)).collect()
    }

    pub fn b_std(&self) -> Vec<f64> {
        self.b_rho.iter().map(|r| softplus(*r)).collect()
    }

    pub fn mean_layer(&self) -> DenseLayer {
        DenseLayer {
            fan_in: self.fan_in,
            fan_out: self.fan_out,
            weights: self.w_mu.clone(),
            biases: self.b_mu.clone(),
        }
    }

    /// `mu + softplus(rho) * eps` for given noise.
    pub fn sample_with(&self, noise: &LayerNoise) -> DenseLayer {
        let mix = |mu: &[f64], rho: &[f64], eps: &[f64]| -> Vec<f64> {
            mu.iter()
                .zip(rho)
                .zip(eps)
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect()
        };
        DenseLayer {
            fan_in: self.fan_in,
            fan_out: self.fan_out,
            weights: mix(&self.w_mu, &self.w_rho, &noise.weights),
            biases: mix(&self.b_mu, &self.b_rho, &noise.biases),
        }
    }

    /// Reparameterized draw with fresh noise.
    pub fn sample_weights(&self, rng: &mut Rng) -> DenseLayer {
        self.sample_with(&LayerNoise::draw(self.fan_in, self.fan_out, rng))
    }

    /// KL from the posterior to `N(0, prior_std^2)`, summed over the layer.
    pub fn kl(&self, prior_std: f64) -> f64 {
        let part = |mu: &[f64], rho: &[f64]| -> f64 {
            mu.iter()
                .zip(rho)
                .map(|(m, r)| kl_unchecked(*m, softplus(*r), 0.0, prior_std))
                .sum()
        };
        part(&self.w_mu, &self.w_rho) + part(&self.b_mu, &self.b_rho)
    }

    fn num_params(&self) -> usize {
        2 * (self.w_mu.len() + self.b_mu.len())
    }

    fn validate(&self, fan_in: usize, fan_out: usize) -> Result<()> {
        let ok = self.fan_in == fan_in
            && self.fan_out == fan_out
            && self.w_mu.len() == fan_in * fan_out
            && self.w_rho.len() == fan_in * fan_out
            && self.b_mu.len() == fan_out
            && self.b_rho.len() == fan_out;
        if !ok {
            return Err(Error::Shape {
                context: "variational layer",
                expected: fan_in * fan_out,
                got: self.w_mu.len(),
            });
        }
        let finite = self
            .w_mu
            .iter()
            .chain(&self.w_rho)
            .chain(&self.b_mu)
            .chain(&self.b_rho)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric {
                layer: 0,
                what: "non-finite posterior parameter".into(),
            });
        }
        Ok(())
    }
}

/// Complexity and likelihood parts of the free energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergy {
    /// Batch-weighted KL divergence to the prior.
    pub complexity: f64,
    /// Summed negative log-likelihood averaged over weight draws.
    pub likelihood: f64,
}

impl FreeEnergy {
    pub fn total(&self) -> f64 {
        self.complexity + self.likelihood
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianNetwork {
    pub spec: NetworkSpec,
    pub layers: Vec<VariationalLayer>,
    /// Training-set size used to weight the complexity cost.
    pub n_train: usize,
    pub config: BnnConfig,
}

impl BayesianNetwork {
    /// Posterior means from the seeded deterministic initialization,
    /// stds at `init_std_fraction * prior_std`.
    pub fn new(spec: NetworkSpec, n_train: usize, config: BnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if spec.head != HeadKind::Gaussian {
            return Err(Error::Config("Bayesian networks use a gaussian head".into()));
        }
        let base = Network::new(spec, seed)?;
        Self::from_network(&base, n_train, config)
    }

    pub fn from_network(base: &Network, n_train: usize, config: BnnConfig) -> Result<Self> {
        config.validate()?;
        let init = config.init_std_fraction * config.prior_std;
        let net = BayesianNetwork {
            spec: base.spec.clone(),
            layers: base
                .layers
                .iter()
                .map(|l| VariationalLayer::from_dense(l, init))
                .collect(),
            n_train,
            config,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.config.validate()?;
        if self.n_train == 0 {
            return Err(Error::Parameter("n_train must be at least 1".into()));
        }
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape {
                context: "variational layer count",
                expected: shapes.len(),
                got: self.layers.len(),
            });
        }
        for (l, (fi, fo)) in self.layers.iter().zip(shapes) {
            l.validate(fi, fo)?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(VariationalLayer::num_params).sum()
    }

    /// Network of posterior means.
    pub fn mean_network(&self) -> Network {
        Network {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(VariationalLayer::mean_layer).collect(),
        }
    }

    pub fn kl(&self) -> f64 {
        self.layers.iter().map(|l| l.kl(self.config.prior_std)).sum()
    }

    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<LayerNoise> {
        self.layers
            .iter()
            .map(|l| LayerNoise::draw(l.fan_in, l.fan_out, rng))
            .collect()
    }

    pub fn sample_network(&self, noise: &[LayerNoise]) -> Vec<DenseLayer> {
        self.layers.iter().zip(noise).map(|(l, n)| l.sample_with(n)).collect()
    }

    /// One stochastic pass over a batch with one weight draw.
    pub fn forward_sample(&self, x: &[f64], batch: usize, rng: &mut Rng) -> Result<HeadOutput> {
        check_input(x, batch, self.spec.input_dim)?;
        let layers = self.sample_network(&self.draw_noise(rng));
        let raw = forward_output(&layers, &self.spec.activations, x, batch, &Modifiers::default())?;
        Ok(HeadOutput::from_raw(&raw, self.spec.head, self.spec.output_dim))
    }

    fn kl_weight(&self, batch: usize) -> f64 {
        self.config.kl_weight_scale * batch as f64 / self.n_train as f64
    }

    /// Free energy of a batch: `(batch / n_train) KL` plus the summed
    /// negative log-likelihood averaged over `mc_samples` weight draws.
    pub fn free_energy(
        &self,
        x: &[f64],
        y: &[f64],
        batch: usize,
        mc_samples: usize,
        rng: &mut Rng,
    ) -> Result<FreeEnergy> {
        if mc_samples == 0 || batch == 0 {
            return Err(Error::Parameter(
                "free energy needs a non-empty batch and at least one draw".into(),
            ));
        }
        let noises: Vec<Vec<LayerNoise>> = (0..mc_samples).map(|_| self.draw_noise(rng)).collect();
        Ok(self.free_energy_with(x, y, batch, &noises, false)?.0)
    }

    /// Free energy for explicit noise draws and, if asked, its flat
    /// gradient in `(w_mu, w_rho, b_mu, b_rho)` order per layer.
    pub fn free_energy_with(
        &self,
        x: &[f64],
        y: &[f64],
        batch: usize,
        noises: &[Vec<LayerNoise>],
        gradient: bool,
    ) -> Result<(FreeEnergy, Vec<f64>)> {
        check_input(x, batch, self.spec.input_dim)?;
        let s = noises.len() as f64;
        let mut grads: Vec<VariationalLayer> = if gradient {
            self.layers
                .iter()
                .map(|l| VariationalLayer {
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                    w_mu: vec![0.0; l.w_mu.len()],
                    w_rho: vec![0.0; l.w_rho.len()],
                    b_mu: vec![0.0; l.b_mu.len()],
                    b_rho: vec![0.0; l.b_rho.len()],
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut likelihood = 0.0;
        for noise in noises {
            let layers = self.sample_network(noise);
            let m = Modifiers::default();
            let cache = forward_layers(&layers, &self.spec.activations, x, batch, &m)?;
            let (mean_nll, d_out) = Loss::GaussianNll.evaluate(cache.output(), y, batch, &self.spec)?;
            likelihood += mean_nll * batch as f64 / s;
            if !gradient {
                continue;
            }
            let scale = batch as f64 / s;
            let d_out: Vec<f64> = d_out.into_iter().map(|d| d * scale).collect();
            let lg = backward_layers(&layers, &self.spec.activations, &cache, d_out, &m)?;
            for ((g, dense), (layer, eps)) in grads.iter_mut().zip(&lg).zip(self.layers.iter().zip(noise)) {
                accumulate(&mut g.w_mu, &mut g.w_rho, &dense.weights, &eps.weights, &layer.w_rho);
                accumulate(&mut g.b_mu, &mut g.b_rho, &dense.biases, &eps.biases, &layer.b_rho);
            }
        }
        let kl_weight = self.kl_weight(batch);
        let energy = FreeEnergy {
            complexity: kl_weight * self.kl(),
            likelihood,
        };
        if !gradient {
            return Ok((energy, Vec::new()));
        }
        let prior_var = self.config.prior_std * self.config.prior_std;
        let mut flat = Vec::with_capacity(self.num_params());
        for (g, layer) in grads.iter_mut().zip(&self.layers) {
            add_kl_gradient(
                &mut g.w_mu,
                &mut g.w_rho,
                &layer.w_mu,
                &layer.w_rho,
                kl_weight,
                prior_var,
            );
            add_kl_gradient(
                &mut g.b_mu,
                &mut g.b_rho,
                &layer.b_mu,
                &layer.b_rho,
                kl_weight,
                prior_var,
            );
            if self.config.freeze_std {
                g.w_rho.iter_mut().for_each(|v| *v = 0.0);
                g.b_rho.iter_mut().for_each(|v| *v = 0.0);
            }
            flat.extend_from_slice(&g.w_mu);
            flat.extend_from_slice(&g.w_rho);
            flat.extend_from_slice(&g.b_mu);
            flat.extend_from_slice(&g.b_rho);
        }
        Ok((energy, flat))
    }

    /// Predictive distribution from `passes` weight draws.
    pub fn bnn_predict(
        &self,
        x: &[f64],
        batch: usize,
        passes: usize,
        level: f64,
        seed: u64,
        exec: Exec,
    ) -> Result<PredictiveDistribution> {
        check_input(x, batch, self.spec.input_dim)?;
        let n = batch * self.spec.output_dim;
        monte_carlo(n, passes, level, seed, exec, |rng| {
            let out = self.forward_sample(x, batch, rng)?;
            Ok((out.mean, out.sigma))
        })
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w_mu.as_mut_slice(),
                    l.w_rho.as_mut_slice(),
                    l.b_mu.as_mut_slice(),
                    l.b_rho.as_mut_slice(),
                ]
            })
            .collect()
    }
}

/// `d mu += dW`, `d rho += dW * eps * sigmoid(rho)`.
fn accumulate(g_mu: &mut [f64], g_rho: &mut [f64], dw: &[f64], eps: &[f64], rho: &[f64]) {
    for i in 0..dw.len() {
        g_mu[i] += dw[i];
        g_rho[i] += dw[i] * eps[i] * sigmoid(rho[i]);
    }
}

fn add_kl_gradient(g_mu: &mut [f64], g_rho: &mut [f64], mu: &[f64], rho: &[f64], weight: f64, prior_var: f64) {
    if weight == 0.0 {
        return;
    }
    for i in 0..mu.len() {
        let s = softplus(rho[i]);
        g_mu[i] += weight * mu[i] / prior_var;
        g_rho[i] += weight * (s / prior_var - 1.0 / s) * sigmoid(rho[i]);
    }
}

#[derive(Clone)]
struct VariationalObjective(BayesianNetwork);

impl Trainable for VariationalObjective {
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.params_mut()
    }

    /// Free energy per training example.
    fn batch_objective(&self, x: &[f64], y: &[f64], batch: usize, ctx: &mut StepContext) -> Result<(f64, Vec<f64>)> {
        let net = &self.0;
        let noises: Vec<Vec<LayerNoise>> = (0..net.config.mc_samples).map(|_| net.draw_noise(ctx.rng)).collect();
        let (energy, mut grad) = net.free_energy_with(x, y, batch, &noises, true)?;
        let b = batch as f64;
        grad.iter_mut().for_each(|g| *g /= b);
        Ok((energy.total() / b, grad))
    }

    fn validation_objective(&self, x: &[f64], y: &[f64], batch: usize, ctx: &mut StepContext) -> Result<f64> {
        let net = &self.0;
        let noises: Vec<Vec<LayerNoise>> = (0..net.config.mc_samples).map(|_| net.draw_noise(ctx.rng)).collect();
        let (energy, _) = net.free_energy_with(x, y, batch, &noises, false)?;
        let kl = net.config.kl_weight_scale * net.kl() / net.n_train as f64;
        Ok(kl + energy.likelihood / batch as f64)
    }
}

/// Minimize the free energy with the shared optimizer and schedule.
/// `config.loss` and `config.weight_decay` are not used.
pub fn train_bnn(
    net: BayesianNetwork,
    train: &TrainingData,
    validation: &TrainingData,
    config: &TrainConfig,
) -> Result<(BayesianNetwork, TrainHistory)> {
    net.validate()?;
    let mut net = net;
    net.n_train = train.len().max(1);
    let (model, history) = fit(VariationalObjective(net), train, validation, config)?;
    Ok((model.0, history))
}
