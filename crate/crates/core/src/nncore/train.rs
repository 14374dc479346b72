use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::Loss;
use super::network::{check_input, flatten, layer_slices_mut, Network};
use super::optim::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            patience: 30,
            min_delta: 0.0,
        }
    }
}

/// Multiply the learning rate by `factor` after `patience` epochs without
/// improvement, never going below `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: Loss,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop: EarlyStopping,
    pub lr_on_plateau: PlateauSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: Loss::Mae,
            weight_decay: 0.0,
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 750,
            early_stop: EarlyStopping::default(),
            lr_on_plateau: PlateauSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        let p = &self.lr_on_plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) {
            return Err(Error::Config("lr_on_plateau.factor must lie in (0, 1)".into()));
        }
        if !(p.min_lr >= 0.0) {
            return Err(Error::Config("lr_on_plateau.min_lr must be non-negative".into()));
        }
        if !(self.early_stop.min_delta >= 0.0) {
            return Err(Error::Config("early_stop.min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub stop_reason: StopReason,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    fn empty() -> Self {
        TrainHistory {
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            learning_rate: Vec::new(),
            stop_reason: StopReason::MaxEpochs,
            best_epoch: None,
        }
    }

    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.val_loss[e])
    }
}

/// Row-major inputs with matching targets.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub input_dim: usize,
    pub output_dim: usize,
}

impl<'a> TrainingData<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64], input_dim: usize, output_dim: usize) -> Result<Self> {
        let n = y.len().checked_div(output_dim).unwrap_or(0);
        if output_dim == 0 || !y.len().is_multiple_of(output_dim) {
            return Err(Error::Data("target length is not a multiple of output_dim".into()));
        }
        check_input(x, n, input_dim)?;
        Ok(TrainingData {
            x,
            y,
            input_dim,
            output_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len() / self.output_dim
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (a, b) = (self.input_dim, self.output_dim);
        let mut x = Vec::with_capacity(rows.len() * a);
        let mut y = Vec::with_capacity(rows.len() * b);
        for &r in rows {
            x.extend_from_slice(&self.x[r * a..(r + 1) * a]);
            y.extend_from_slice(&self.y[r * b..(r + 1) * b]);
        }
        (x, y)
    }
}

/// Per-step information available to a model's objective.
pub struct StepContext<'a> {
    pub rng: &'a mut Rng,
    /// Number of training examples, for per-batch weighting of global terms.
    pub n_train: usize,
}

/// A model whose parameters [`fit`] can optimize.
pub trait Trainable: Clone {
    fn num_params(&self) -> usize;
    /// Parameter slices in the same order as the flat gradient.
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    /// Training objective on one mini-batch and its flat gradient.
    fn batch_objective(&self, x: &[f64], y: &[f64], batch: usize, ctx: &mut StepContext) -> Result<(f64, Vec<f64>)>;
    /// Score used for early stopping and the plateau schedule.
    fn validation_objective(&self, x: &[f64], y: &[f64], batch: usize, ctx: &mut StepContext) -> Result<f64>;
}

/// Seeded mini-batch Adam with early stopping and LR-on-plateau.
///
/// The validation objective is evaluated with the same RNG seed every epoch
/// so stochastic models are compared on common random numbers. The returned
/// model holds the parameters of the best validation epoch.
pub fn fit<M: Trainable>(
    model: M,
    train: &TrainingData,
    validation: &TrainingData,
    config: &TrainConfig,
) -> Result<(M, TrainHistory)> {
    config.validate()?;
    let mut history = TrainHistory::empty();
    if config.max_epochs == 0 {
        return Ok((model, history));
    }
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let n = train.len();
    let mut rng = seeded(config.seed);
    let val_seed = derive_seed(config.seed, "validation");
    let mut adam = AdamState::new(model.num_params(), config.adam);
    let mut order: Vec<usize> = (0..n).collect();
    let mut lr = config.learning_rate;

    let mut model = model;
    let mut best_model = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stop_ref = f64::INFINITY;
    let mut stop_wait = 0;
    let mut plateau_ref = f64::INFINITY;
    let mut plateau_wait = 0;
    let min_delta = config.early_stop.min_delta;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for rows in order.chunks(config.batch_size) {
            let (xb, yb) = train.gather(rows);
            let mut ctx = StepContext {
                rng: &mut rng,
                n_train: n,
            };
            let (loss, grad) = model.batch_objective(&xb, &yb, rows.len(), &mut ctx)?;
            if !loss.is_finite() {
                history.train_loss.push(f64::NAN);
                return Err(Error::Training {
                    epoch,
                    history: Box::new(history),
                });
            }
            total += loss * rows.len() as f64;
            adam.step(model.params_mut(), &grad, lr)?;
        }
        let mut val_rng = seeded(val_seed);
        let mut ctx = StepContext {
            rng: &mut val_rng,
            n_train: n,
        };
        let val = model.validation_objective(validation.x, validation.y, validation.len(), &mut ctx);
        history.train_loss.push(total / n as f64);
        history.learning_rate.push(lr);
        let val = match val {
            Ok(v) if v.is_finite() => v,
            _ => {
                history.val_loss.push(f64::NAN);
                return Err(Error::Training {
                    epoch,
                    history: Box::new(history),
                });
            }
        };
        history.val_loss.push(val);

        if val < best_val {
            best_val = val;
            best_model = model.clone();
            history.best_epoch = Some(epoch);
        }
        if val < stop_ref - min_delta {
            stop_ref = val;
            stop_wait = 0;
        } else {
            stop_wait += 1;
            if stop_wait >= config.early_stop.patience {
                history.stop_reason = StopReason::EarlyStop;
                break;
            }
        }
        if val < plateau_ref - min_delta {
            plateau_ref = val;
            plateau_wait = 0;
        } else {
            plateau_wait += 1;
            if plateau_wait >= config.lr_on_plateau.patience {
                lr = (lr * config.lr_on_plateau.factor).max(config.lr_on_plateau.min_lr.min(lr));
                plateau_wait = 0;
            }
        }
    }
    Ok((best_model, history))
}

/// Deterministic network with its training loss and weight decay.
#[derive(Clone)]
struct PointObjective {
    net: Network,
    loss: Loss,
    weight_decay: f64,
}

impl Trainable for PointObjective {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        layer_slices_mut(&mut self.net.layers)
    }

    fn batch_objective(&self, x: &[f64], y: &[f64], batch: usize, _: &mut StepContext) -> Result<(f64, Vec<f64>)> {
        let cache = self.net.forward_cached(x, batch)?;
        let (loss, grads) = self.net.backward(&cache, y, self.loss, self.weight_decay)?;
        Ok((loss, flatten(&grads)))
    }

    fn validation_objective(&self, x: &[f64], y: &[f64], batch: usize, _: &mut StepContext) -> Result<f64> {
        let raw = self.net.forward_batch(x, batch)?;
        Ok(self.loss.evaluate(&raw, y, batch, &self.net.spec)?.0)
    }
}

/// Train a deterministic network on `config.loss + l2_penalty(weight_decay)`.
pub fn train(
    net: Network,
    train: &TrainingData,
    validation: &TrainingData,
    config: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    net.validate()?;
    let model = PointObjective {
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
    use crate::nncore::{Activation, HeadKind, NetworkSpec};
    use rand::Rng as _;

    fn linear_data(n: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let y = x.iter().map(|v| 2.0 * v + 1.0).collect();
        (x, y)
    }

    #[test]
    fn zero_epochs_returns_initial_net() {
        let net = Network::new(NetworkSpec::mlp(1, &[3], Activation::Tanh, 1, HeadKind::Point), 1).unwrap();
        let (x, y) = linear_data(10);
        let d = TrainingData::new(&x, &y, 1, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (out, h) = train(net.clone(), &d, &d, &cfg).unwrap();
        assert_eq!(out, net);
        assert_eq!(h.epochs(), 0);
    }

    #[test]
    fn fits_linear_target() {
        let net = Network::new(NetworkSpec::mlp(1, &[1], Activation::Identity, 1, HeadKind::Point), 4).unwrap();
        let (x, y) = linear_data(40);
        let (xv, yv) = linear_data(13);
        let cfg = TrainConfig {
            loss: Loss::Mse,
            learning_rate: 0.05,
            batch_size: 8,
            max_epochs: 500,
            early_stop: EarlyStopping {
                patience: 500,
                min_delta: 0.0,
            },
            ..TrainConfig::default()
        };
        let (_, h) = train(
            net,
            &TrainingData::new(&x, &y, 1, 1).unwrap(),
            &TrainingData::new(&xv, &yv, 1, 1).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!(h.best_val_loss().unwrap() < 1e-6, "{:?}", h.best_val_loss());
    }

    #[test]
    fn fits_arbitrary_pairs() {
        let mut rng = seeded(11);
        let x: Vec<f64> = (0..20).map(|i| -1.0 + i as f64 / 10.0).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let net = Network::new(NetworkSpec::mlp(1, &[16], Activation::Tanh, 1, HeadKind::Point), 2).unwrap();
        let d = TrainingData::new(&x, &y, 1, 1).unwrap();
        let cfg = TrainConfig {
            loss: Loss::Mse,
            learning_rate: 0.01,
            batch_size: 20,
            max_epochs: 20000,
            early_stop: EarlyStopping {
                patience: 2000,
                min_delta: 0.0,
            },
            lr_on_plateau: PlateauSchedule {
                factor: 0.5,
                patience: 500,
                min_lr: 1e-5,
            },
            ..TrainConfig::default()
        };
        let (net, _) = train(net, &d, &d, &cfg).unwrap();
        let pred = net.forward_batch(&x, 20).unwrap();
        let mse = crate::nncore::loss_mse(&pred, &y, 1).unwrap();
        assert!(mse < 1e-4, "mse {mse}");
    }

    #[test]
    fn restores_best_and_schedule_is_monotone() {
        let net = Network::new(NetworkSpec::mlp(1, &[8], Activation::Relu, 1, HeadKind::Point), 9).unwrap();
        let (x, y) = linear_data(30);
        let yv: Vec<f64> = y.iter().map(|v| v + 0.3).collect();
        let cfg = TrainConfig {
            loss: Loss::Mae,
            learning_rate: 0.05,
            max_epochs: 200,
            early_stop: EarlyStopping {
                patience: 15,
                min_delta: 1e-4,
            },
            lr_on_plateau: PlateauSchedule {
                factor: 0.5,
                patience: 3,
                min_lr: 1e-3,
            },
            ..TrainConfig::default()
        };
        let d = TrainingData::new(&x, &y, 1, 1).unwrap();
        let v = TrainingData::new(&x, &yv, 1, 1).unwrap();
        let (best, h) = train(net, &d, &v, &cfg).unwrap();
        assert!(h.epochs() <= cfg.max_epochs);
        let min = h.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        let pred = best.forward_batch(&x, 30).unwrap();
        assert_eq!(loss_mae_of(&pred, &yv), min);
        assert!(h.learning_rate.windows(2).all(|w| w[1] <= w[0]));
        assert!(h.learning_rate.iter().all(|lr| *lr >= 1e-3));
    }

    fn loss_mae_of(p: &[f64], t: &[f64]) -> f64 {
        crate::nncore::loss_mae(p, t, 1).unwrap()
    }

    #[test]
    fn divergence_reports_history() {
        let net = Network::new(NetworkSpec::mlp(1, &[4], Activation::Relu, 1, HeadKind::Point), 3).unwrap();
        let (x, _) = linear_data(10);
        let y = vec![1e200; 10];
        let cfg = TrainConfig {
            loss: Loss::Mse,
            learning_rate: 1.0,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let d = TrainingData::new(&x, &y, 1, 1).unwrap();
        match train(net, &d, &d, &cfg) {
            Err(Error::Training { history, .. }) => assert!(history.epochs() <= 50),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            lr_on_plateau: PlateauSchedule {
                factor: 1.0,
                ..PlateauSchedule::default()
            },
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
