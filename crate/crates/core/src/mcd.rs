//! Dropout networks and Monte Carlo Dropout prediction.
//!
//! Dropout multiplies the input of every affine layer (the network input
//! included, unless disabled) by an independent Bernoulli(p) mask, with
//! `p = 1 - drop_rate` the keep probability. Masks stay active at
//! prediction time; [`DropoutNetwork::mc_predict`] averages `T` passes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nncore::{
    add_l2_gradient, backward_layers, check_input, fit, flatten, forward_layers, forward_output, layer_slices_mut,
    HeadOutput, Loss, Mask, Modifiers, Network, NetworkSpec, StepContext, TrainConfig, TrainHistory, Trainable,
    TrainingData,
};
use crate::predictive::{monte_carlo, PredictiveDistribution};
use crate::rng::Rng;

/// How kept units are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScaling {
    /// Kept units pass through unchanged.
    Plain,
    /// Kept units are divided by `p`, so each layer's expected input is
    /// unchanged by dropout.
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutConfig {
    pub drop_rate: f64,
    pub mask_scaling: MaskScaling,
    /// Multiply hidden activations by `sqrt(1 / width)`.
    pub width_scaling: bool,
    pub input_dropout: bool,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            drop_rate: 0.2,
            mask_scaling: MaskScaling::Inverted,
            width_scaling: false,
            input_dropout: true,
        }
    }
}

impl DropoutConfig {
    pub fn keep_prob(&self) -> f64 {
        1.0 - self.drop_rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.drop_rate >= 0.0 && self.drop_rate < 1.0) {
            return Err(Error::Parameter(format!("drop_rate {} outside [0, 1)", self.drop_rate)));
        }
        Ok(())
    }
}

/// Diagonal of a 0/1 mask with entries equal to 1 with probability `keep_prob`.
pub fn dropout_mask(width: usize, keep_prob: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Parameter(format!("keep probability {keep_prob} outside (0, 1]")));
    }
    if keep_prob == 1.0 {
        return Ok(vec![1.0; width]);
    }
    Ok((0..width)
        .map(|_| if rng.random::<f64>() < keep_prob { 1.0 } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutNetwork {
    pub base: Network,
    pub dropout: DropoutConfig,
}

impl DropoutNetwork {
    pub fn new(spec: NetworkSpec, dropout: DropoutConfig, seed: u64) -> Result<Self> {
        dropout.validate()?;
        Ok(DropoutNetwork {
            base: Network::new(spec, seed)?,
            dropout,
        })
    }

    pub fn from_network(base: Network, dropout: DropoutConfig) -> Result<Self> {
        dropout.validate()?;
        base.validate()?;
        Ok(DropoutNetwork { base, dropout })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.base.spec
    }

    pub fn validate(&self) -> Result<()> {
        self.dropout.validate()?;
        self.base.validate()
    }

    /// Fresh masks for every layer input; `rows` masks per layer, or one
    /// shared row when `rows` is `None`.
    pub fn draw_masks(&self, rows: Option<usize>, rng: &mut Rng) -> Result<Vec<Option<Mask>>> {
        let p = self.dropout.keep_prob();
        let scale = match self.dropout.mask_scaling {
            MaskScaling::Plain => 1.0,
            MaskScaling::Inverted => 1.0 / p,
        };
        self.base
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                if p == 1.0 || (l == 0 && !self.dropout.input_dropout) {
                    return Ok(None);
                }
                let mut values = dropout_mask(layer.fan_in * rows.unwrap_or(1), p, rng)?;
                if scale != 1.0 {
                    values.iter_mut().for_each(|v| *v *= scale);
                }
                Ok(Some(Mask {
                    values,
                    shared: rows.is_none(),
                }))
            })
            .collect()
    }

    fn modifiers<'a>(&self, masks: &'a [Option<Mask>]) -> Modifiers<'a> {
        Modifiers {
            masks: Some(masks),
            width_scaling: self.dropout.width_scaling,
        }
    }

    /// One stochastic pass over a batch, all rows sharing one mask draw.
    pub fn forward_dropout(&self, x: &[f64], batch: usize, rng: &mut Rng) -> Result<HeadOutput> {
        let spec = &self.base.spec;
        check_input(x, batch, spec.input_dim)?;
        let masks = self.draw_masks(None, rng)?;
        let raw = forward_output(&self.base.layers, &spec.activations, x, batch, &self.modifiers(&masks))?;
        Ok(HeadOutput::from_raw(&raw, spec.head, spec.output_dim))
    }

    /// `lambda * sum(p ||W||^2 + ||b||^2)`.
    pub fn penalty(&self, lambda: f64) -> f64 {
        let p = self.dropout.keep_prob();
        lambda
            * self
                .base
                .layers
                .iter()
                .map(|l| p * l.weights.iter().map(|w| w * w).sum::<f64>() + l.biases.iter().map(|b| b * b).sum::<f64>())
                .sum::<f64>()
    }

    /// Dropout objective on a batch with independent per-row masks: data
    /// loss plus [`penalty`](Self::penalty), and its flat gradient.
    pub fn mcd_loss(
        &self,
        x: &[f64],
        y: &[f64],
        batch: usize,
        loss: Loss,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let spec = &self.base.spec;
        check_input(x, batch, spec.input_dim)?;
        let masks = self.draw_masks(Some(batch), rng)?;
        let m = self.modifiers(&masks);
        let cache = forward_layers(&self.base.layers, &spec.activations, x, batch, &m)?;
        let (data, d_out) = loss.evaluate(cache.output(), y, batch, spec)?;
        let mut grads = backward_layers(&self.base.layers, &spec.activations, &cache, d_out, &m)?;
        if lambda > 0.0 {
            add_l2_gradient(&mut grads, &self.base.layers, lambda, self.dropout.keep_prob());
        }
        Ok((data + self.penalty(lambda), flatten(&grads)))
    }

    /// Monte Carlo Dropout prediction over `passes` mask draws.
    pub fn mc_predict(
        &self,
        x: &[f64],
        batch: usize,
        passes: usize,
        level: f64,
        seed: u64,
        exec: Exec,
    ) -> Result<PredictiveDistribution> {
        check_input(x, batch, self.base.spec.input_dim)?;
        let n = batch * self.base.spec.output_dim;
        monte_carlo(n, passes, level, seed, exec, |rng| {
            let out = self.forward_dropout(x, batch, rng)?;
            Ok((out.mean, out.sigma))
        })
    }
}

#[derive(Clone)]
struct DropoutObjective {
    net: DropoutNetwork,
    loss: Loss,
    weight_decay: f64,
}

impl Trainable for DropoutObjective {
    fn num_params(&self) -> usize {
        self.net.base.num_params()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        layer_slices_mut(&mut self.net.base.layers)
    }

    fn batch_objective(&self, x: &[f64], y: &[f64], batch: usize, ctx: &mut StepContext) -> Result<(f64, Vec<f64>)> {
        self.net.mcd_loss(x, y, batch, self.loss, self.weight_decay, ctx.rng)
    }

    fn validation_objective(&self, x: &[f64], y: &[f64], batch: usize, ctx: &mut StepContext) -> Result<f64> {
        let spec = &self.net.base.spec;
        let masks = self.net.draw_masks(Some(batch), ctx.rng)?;
        let raw = forward_output(
            &self.net.base.layers,
            &spec.activations,
            x,
            batch,
            &self.net.modifiers(&masks),
        )?;
        Ok(self.loss.evaluate(&raw, y, batch, spec)?.0)
    }
}

/// Train with dropout active on the penalized objective.
pub fn train_mcd(
    net: DropoutNetwork,
    train: &TrainingData,
    validation: &TrainingData,
    config: &TrainConfig,
) -> Result<(DropoutNetwork, TrainHistory)> {
    net.validate()?;
    let model = DropoutObjective {
        net,
        loss: config.loss,
        weight_decay: config.weight_decay,
    };
    let (model, history) = fit(model, train, validation, config)?;
    Ok((model.net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{loss_mse, Activation, HeadKind};
    use crate::rng::seeded;

    fn gaussian_net(drop_rate: f64) -> DropoutNetwork {
        let spec = NetworkSpec::mlp(2, &[12, 8], Activation::Relu, 1, HeadKind::Gaussian);
        DropoutNetwork::new(
            spec,
            DropoutConfig {
                drop_rate,
                ..DropoutConfig::default()
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn mask_statistics() {
        let mut rng = seeded(1);
        assert!(dropout_mask(50, 1.0, &mut rng).unwrap().iter().all(|v| *v == 1.0));
        let a = dropout_mask(100_000, 0.8, &mut rng).unwrap();
        let b = dropout_mask(100_000, 0.8, &mut rng).unwrap();
        let frac = a.iter().sum::<f64>() / 1e5;
        assert!((0.79..=0.81).contains(&frac), "{frac}");
        let (ma, mb) = (frac, b.iter().sum::<f64>() / 1e5);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 1e5;
        let corr = cov / (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
        assert!(corr.abs() < 0.02, "{corr}");
        assert!(dropout_mask(3, 0.0, &mut rng).is_err());
        assert!(dropout_mask(3, 1.5, &mut rng).is_err());
    }

    #[test]
    fn keep_all_matches_deterministic_network() {
        let net = gaussian_net(0.0);
        let x = [0.3, -0.4, 1.0, 2.0];
        let mut rng = seeded(3);
        assert_eq!(
            net.forward_dropout(&x, 2, &mut rng).unwrap(),
            net.base.predict(&x, 2).unwrap()
        );
        let p = net.mc_predict(&x, 2, 10, 0.95, 3, Exec::Sequential).unwrap();
        let d = net.base.predict(&x, 2).unwrap();
        assert_eq!(p.epistemic_std, vec![0.0, 0.0]);
        for i in 0..2 {
            assert!((p.mean[i] - d.mean[i]).abs() < 1e-12);
            assert!((p.aleatoric_std[i] - d.sigma.as_ref().unwrap()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_pass_is_reproducible() {
        let net = gaussian_net(0.2);
        let x = [0.1, 0.2];
        let a = net.forward_dropout(&x, 1, &mut seeded(9)).unwrap();
        let b = net.forward_dropout(&x, 1, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_masks_halve_expected_preactivation() {
        let spec = NetworkSpec::mlp(4, &[6], Activation::Relu, 1, HeadKind::Point);
        let mut base = Network::zeros(spec).unwrap();
        for l in &mut base.layers {
            l.weights.iter_mut().for_each(|w| *w = 1.0);
        }
        let config = DropoutConfig {
            drop_rate: 0.5,
            mask_scaling: MaskScaling::Plain,
            width_scaling: false,
            input_dropout: false,
        };
        let net = DropoutNetwork::from_network(base.clone(), config).unwrap();
        let x = [1.0, 0.5, 0.25, 2.0];
        let full = base.forward(&x).unwrap()[0];
        let mut rng = seeded(17);
        let passes = 100_000;
        let mean = (0..passes)
            .map(|_| net.forward_dropout(&x, 1, &mut rng).unwrap().mean[0])
            .sum::<f64>()
            / passes as f64;
        assert!((mean / (0.5 * full) - 1.0).abs() < 0.02, "{mean} vs {full}");
    }

    #[test]
    fn width_scaling_matches_hand_formula() {
        let spec = NetworkSpec::mlp(1, &[4], Activation::Identity, 1, HeadKind::Point);
        let mut base = Network::zeros(spec).unwrap();
        base.layers[0].weights = vec![1.0; 4];
        base.layers[1].weights = vec![1.0; 4];
        let net = DropoutNetwork::from_network(
            base,
            DropoutConfig {
                drop_rate: 0.0,
                width_scaling: true,
                ..DropoutConfig::default()
            },
        )
        .unwrap();
        let out = net.forward_dropout(&[2.0], 1, &mut seeded(0)).unwrap();
        // four hidden units of 2, each scaled by sqrt(1/4)
        assert!((out.mean[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn loss_reduces_to_plain_cases() {
        let spec = NetworkSpec::mlp(2, &[5], Activation::Tanh, 1, HeadKind::Point);
        let net = DropoutNetwork::new(
            spec,
            DropoutConfig {
                drop_rate: 0.0,
                ..DropoutConfig::default()
            },
            4,
        )
        .unwrap();
        let x = [0.2, 0.1, -0.3, 0.8];
        let y = [0.5, -0.5];
        let (l, _) = net.mcd_loss(&x, &y, 2, Loss::Mse, 0.0, &mut seeded(1)).unwrap();
        let pred = net.base.forward_batch(&x, 2).unwrap();
        assert!((l - loss_mse(&pred, &y, 1).unwrap()).abs() < 1e-14);
        let (lp, _) = net.mcd_loss(&x, &y, 2, Loss::Mse, 0.1, &mut seeded(1)).unwrap();
        let eq7 = l + crate::nncore::l2_penalty(&net.base.layers, 0.1);
        assert!((lp - eq7).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters_have_zero_penalty() {
        let spec = NetworkSpec::mlp(2, &[5], Activation::Tanh, 1, HeadKind::Point);
        let net = DropoutNetwork::from_network(
            Network::zeros(spec).unwrap(),
            DropoutConfig {
                drop_rate: 0.8,
                ..DropoutConfig::default()
            },
        )
        .unwrap();
        assert_eq!(net.penalty(0.1), 0.0);
    }

    #[test]
    fn prediction_is_exec_independent_and_seeded() {
        let net = gaussian_net(0.2);
        let x = [0.1, 0.2, 0.5, -0.5, 1.0, 0.0];
        let a = net.mc_predict(&x, 3, 600, 0.95, 42, Exec::Sequential).unwrap();
        let b = net.mc_predict(&x, 3, 600, 0.95, 42, Exec::Parallel).unwrap();
        let c = net.mc_predict(&x, 3, 600, 0.95, 43, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mean, c.mean);
        for i in 0..3 {
            let se = a.epistemic_std[i] / (600f64).sqrt();
            assert!((a.mean[i] - c.mean[i]).abs() < 5.0 * se + 1e-12);
        }
        assert!(net.mc_predict(&x, 3, 1, 0.95, 42, Exec::Sequential).is_err());
    }
}
