//! Random search, grid search and the two-stage combination.
//!
//! Trials are independent: trial `i` samples from RNG sub-stream `i` and
//! receives its own training seed, so trials can run in any order or in
//! parallel and the ranked result is the same.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, substream};

/// Architecture and optimizer settings under search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    /// Inclusive range of hidden-layer counts.
    pub n_hidden_layers: (usize, usize),
    /// Inclusive range of units per hidden layer.
    pub units_per_layer: (usize, usize),
    /// Sort sampled widths so they never increase with depth.
    pub pyramid: bool,
    /// Log-uniform learning-rate range.
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_hidden_layers: (2, 5),
            units_per_layer: (16, 192),
            pyramid: true,
            learning_rate: (1e-5, 1e-2),
            batch_sizes: vec![8, 16, 32, 64],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.n_hidden_layers;
        let (u, v) = self.units_per_layer;
        let (lo, hi) = self.learning_rate;
        if a == 0 || a > b {
            return Err(Error::Config(
                "n_hidden_layers must be a non-empty range starting at 1 or more".into(),
            ));
        }
        if u == 0 || u > v {
            return Err(Error::Config(
                "units_per_layer must be a non-empty range starting at 1 or more".into(),
            ));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config("learning_rate range must be positive and ordered".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config(
                "batch_sizes must be a non-empty set of positive sizes".into(),
            ));
        }
        Ok(())
    }

    /// The same architecture axes with learning rate and batch size pinned.
    pub fn with_fixed_training(&self, learning_rate: f64, batch_size: usize) -> Self {
        SearchSpace {
            learning_rate: (learning_rate, learning_rate),
            batch_sizes: vec![batch_size],
            ..self.clone()
        }
    }

    pub fn sample(&self, rng: &mut crate::rng::Rng) -> Hyperparameters {
        let depth = rng.random_range(self.n_hidden_layers.0..=self.n_hidden_layers.1);
        let mut hidden: Vec<usize> = (0..depth)
            .map(|_| rng.random_range(self.units_per_layer.0..=self.units_per_layer.1))
            .collect();
        if self.pyramid {
            hidden.sort_unstable_by(|a, b| b.cmp(a));
        }
        let (lo, hi) = self.learning_rate;
        let learning_rate = if lo == hi {
            lo
        } else {
            rng.random_range(lo.ln()..=hi.ln()).exp()
        };
        let batch_size = *self.batch_sizes.choose(rng).expect("validated non-empty");
        Hyperparameters {
            hidden,
            learning_rate,
            batch_size,
        }
    }
}

/// Explicit value lists; cells are enumerated architectures first, then
/// learning rates, then batch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub architectures: Vec<Vec<usize>>,
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl Grid {
    pub fn cells(&self) -> Vec<Hyperparameters> {
        let mut out = Vec::with_capacity(self.architectures.len() * self.learning_rates.len() * self.batch_sizes.len());
        for hidden in &self.architectures {
            for &learning_rate in &self.learning_rates {
                for &batch_size in &self.batch_sizes {
                    out.push(Hyperparameters {
                        hidden: hidden.clone(),
                        learning_rate,
                        batch_size,
                    });
                }
            }
        }
        out
    }

    /// Grid holding only `hp`.
    pub fn point(hp: &Hyperparameters) -> Self {
        Grid {
            architectures: vec![hp.hidden.clone()],
            learning_rates: vec![hp.learning_rate],
            batch_sizes: vec![hp.batch_size],
        }
    }
}

/// Refinement around a stage-one optimum: learning rate times
/// `{0.1, 10^-0.5, 1, 10^0.5, 10}`, batch size times `{1/2, 1, 2}`.
pub fn default_stage2_grid(best: &Hyperparameters) -> Grid {
    let lr = best.learning_rate;
    let root = 10f64.sqrt();
    let mut batch_sizes = vec![(best.batch_size / 2).max(1), best.batch_size, best.batch_size * 2];
    batch_sizes.dedup();
    Grid {
        architectures: vec![best.hidden.clone()],
        learning_rates: vec![lr * 0.1, lr / root, lr, lr * root, lr * 10.0],
        batch_sizes,
    }
}

/// What an evaluator reports for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub history_digest: Option<String>,
}

impl From<f64> for Evaluation {
    fn from(objective: f64) -> Self {
        Evaluation {
            objective,
            history_digest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// Draw or grid order.
    pub index: usize,
    pub hyperparameters: Hyperparameters,
    /// Validation loss; `None` when the trial failed.
    pub objective: Option<f64>,
    pub seed: u64,
    pub history_digest: Option<String>,
    pub error: Option<String>,
}

impl Trial {
    pub fn succeeded(&self) -> bool {
        self.objective.is_some()
    }
}

fn run_trials<F>(label: &str, cells: Vec<Hyperparameters>, seed: u64, exec: Exec, evaluate: &F) -> Result<Vec<Trial>>
where
    F: Fn(&Hyperparameters, u64) -> Result<Evaluation> + Sync + Send,
{
    let seeds: Vec<u64> = (0..cells.len())
        .map(|i| derive_seed(seed, &format!("{label}-{i}")))
        .collect();
    let results = exec.map_indexed(cells.len(), |i| evaluate(&cells[i], seeds[i]));
    let trials: Vec<Trial> = cells
        .into_iter()
        .zip(results)
        .enumerate()
        .map(|(index, (hyperparameters, r))| {
            let (objective, history_digest, error) = match r {
                Ok(e) if e.objective.is_finite() => (Some(e.objective), e.history_digest, None),
                Ok(e) => (
                    None,
                    e.history_digest,
                    Some(format!("objective {} is not finite", e.objective)),
                ),
                Err(err) => (None, None, Some(err.to_string())),
            };
            Trial {
                index,
                hyperparameters,
                objective,
                seed: seeds[index],
                history_digest,
                error,
            }
        })
        .collect();
    rank(trials)
}

/// Sort by objective, then index; failed trials last. Fails only when
/// every trial failed.
pub fn rank(mut trials: Vec<Trial>) -> Result<Vec<Trial>> {
    if !trials.iter().any(Trial::succeeded) {
        return Err(Error::Search {
            trials: trials.len(),
            log: trials
                .iter()
                .map(|t| format!("trial {}: {}", t.index, t.error.as_deref().unwrap_or("failed")))
                .collect(),
        });
    }
    trials.sort_by(|a, b| match (a.objective, b.objective) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    Ok(trials)
}

/// `budget` independent draws from `space`, ranked.
pub fn random_search<F>(space: &SearchSpace, budget: usize, seed: u64, exec: Exec, evaluate: F) -> Result<Vec<Trial>>
where
    F: Fn(&Hyperparameters, u64) -> Result<Evaluation> + Sync + Send,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    let cells = (0..budget)
        .map(|i| space.sample(&mut substream(seed, i as u64)))
        .collect();
    run_trials("random", cells, seed, exec, &evaluate)
}

/// Every cell of `grid`, ranked.
pub fn grid_search<F>(grid: &Grid, seed: u64, exec: Exec, evaluate: F) -> Result<Vec<Trial>>
where
    F: Fn(&Hyperparameters, u64) -> Result<Evaluation> + Sync + Send,
{
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid has an empty axis".into()));
    }
    run_trials("grid", cells, seed, exec, &evaluate)
}

/// Fixed training settings of the architecture stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOneTraining {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for StageOneTraining {
    fn default() -> Self {
        StageOneTraining {
            learning_rate: 1e-4,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub stage1: Vec<Trial>,
    pub stage2: Vec<Trial>,
    pub best: Trial,
}

/// Random search over architectures at fixed training settings, then a
/// grid over learning rate and batch size around the winner.
pub fn two_stage_search<F, G>(
    space: &SearchSpace,
    stage1_budget: usize,
    stage1: StageOneTraining,
    stage2_grid: G,
    seed: u64,
    exec: Exec,
    evaluate: F,
) -> Result<TwoStageResult>
where
    F: Fn(&Hyperparameters, u64) -> Result<Evaluation> + Sync + Send,
    G: Fn(&Hyperparameters) -> Grid,
{
    let fixed = space.with_fixed_training(stage1.learning_rate, stage1.batch_size);
    let first = random_search(&fixed, stage1_budget, derive_seed(seed, "stage1"), exec, &evaluate)?;
    let winner = first[0].hyperparameters.clone();
    let mut grid = stage2_grid(&winner);
    grid.architectures = vec![winner.hidden.clone()];
    let second = grid_search(&grid, derive_seed(seed, "stage2"), exec, &evaluate)?;
    let a = &first[0];
    let b = &second[0];
    let best = if b.objective < a.objective {
        b.clone()
    } else {
        a.clone()
    };
    Ok(TwoStageResult {
        stage1: first,
        stage2: second,
        best,
    })
}
