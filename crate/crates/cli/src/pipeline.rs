//! Pipeline stages as library functions.

use std::collections::BTreeMap;
use std::path::Path;

use fluxnet_core::bnnvi::{train_bnn, BayesianNetwork};
use fluxnet_core::evalmetrics::{
    boxplot_summary, nrmse, r_squared, sensitivity_report, AssemblyScore, CoverageReport, CycleError, SensitivityEntry,
};
use fluxnet_core::hpo::{default_stage2_grid, two_stage_search, Evaluation, Hyperparameters, TwoStageResult};
use fluxnet_core::mcd::{train_mcd, DropoutNetwork};
use fluxnet_core::modelio::{history_digest, Mode, Model, ModelFile};
use fluxnet_core::nncore::{train, Network, TrainHistory, TrainingData};
use fluxnet_core::preprocess::{
    build_dataset, decay_correct_campaign, partition, reject_low_count_cycles, RegressionDataset,
};
use fluxnet_core::rng::derive_seed;
use fluxnet_core::synthdata::{simulate_campaign, Campaign, CoreLayout, MeasurementCycle, TrueFluxModel};
use fluxnet_core::{Error, Exec, PredictiveDistribution, Result};
use serde::{Deserialize, Serialize};

use crate::config::{GenConfig, HpoConfig, PrepConfig, RunConfig, TargetColumn};

/// Seed of a named stage, derived from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_seed(master, stage)
}

pub fn generate(config: &GenConfig, seed: u64) -> Result<Campaign> {
    let layout = CoreLayout::reference();
    let model = TrueFluxModel::reference(&layout);
    let cycles = simulate_campaign(
        &model,
        &layout,
        config.n_cycles,
        config.exposure,
        &config.banks,
        &config.defects,
        seed,
        Exec::default(),
    )?;
    Ok(Campaign::new(layout, model, seed, cycles))
}

/// Output of the preprocessing stage.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Training pool per assembly.
    pub datasets: Vec<RegressionDataset>,
    /// Held-out cycles per assembly, same order as `datasets`.
    pub holdout: Vec<RegressionDataset>,
    pub kept_cycles: Vec<String>,
    pub rejected_cycles: Vec<String>,
    pub holdout_cycles: Vec<String>,
    pub sensitivity: Vec<SensitivityEntry>,
}

/// Decay-correct, reject low-count cycles, hold out the last cycles and
/// build per-assembly datasets.
pub fn prepare(campaign: &Campaign, config: &PrepConfig) -> Result<Prepared> {
    let corrected = decay_correct_campaign(campaign)?;
    let (mut kept, rejected) = reject_low_count_cycles(corrected, config.count_threshold)?;
    if kept.len() <= config.holdout_cycles {
        return Err(Error::Data(format!(
            "{} usable cycles cannot cover {} held-out cycles",
            kept.len(),
            config.holdout_cycles
        )));
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    let wanted = |c: &MeasurementCycle| -> MeasurementCycle {
        let mut c = c.clone();
        if !config.assemblies.is_empty() {
            c.profiles.retain(|p| config.assemblies.contains(&p.assembly));
        }
        c
    };
    let kept: Vec<MeasurementCycle> = kept.iter().map(wanted).collect();
    for a in &config.assemblies {
        if !kept.iter().any(|c| c.profile(a).is_some()) {
            return Err(Error::Data(format!("assembly {a} has no measurements")));
        }
    }
    let split_at = kept.len() - config.holdout_cycles;
    let (pool, held) = kept.split_at(split_at);
    let datasets = build_dataset(pool, &campaign.z_mm, config.smooth, false)?;
    let holdout = if held.is_empty() {
        datasets
            .iter()
            .map(|d| RegressionDataset {
                samples: Vec::new(),
                ..d.clone()
            })
            .collect()
    } else {
        build_dataset(held, &campaign.z_mm, config.smooth, false)?
    };
    let sensitivity = match config.smooth {
        Some(s) if distinct_banks(pool) >= 2 => sensitivity_report(pool, s)?,
        _ => Vec::new(),
    };
    Ok(Prepared {
        datasets,
        holdout,
        kept_cycles: pool.iter().map(|c| c.id.clone()).collect(),
        rejected_cycles: rejected.iter().map(|c| c.id.clone()).collect(),
        holdout_cycles: held.iter().map(|c| c.id.clone()).collect(),
        sensitivity,
    })
}

fn distinct_banks(cycles: &[MeasurementCycle]) -> usize {
    let mut b: Vec<u64> = cycles.iter().map(|c| c.bank_mm.to_bits()).collect();
    b.sort_unstable();
    b.dedup();
    b.len()
}

/// A trained model with its training record.
pub struct Trained {
    pub file: ModelFile,
    pub history: TrainHistory,
}

fn with_target(ds: &RegressionDataset, target: TargetColumn) -> RegressionDataset {
    let mut ds = ds.clone();
    if target == TargetColumn::Raw {
        for s in &mut ds.samples {
            s.y_processed = s.y_raw;
        }
    }
    ds
}

/// Partition, normalize on the training split and fit one model.
pub fn train_assembly(dataset: &RegressionDataset, config: &RunConfig, seed: u64) -> Result<Trained> {
    let mut ds = with_target(dataset, config.model.target);
    let split = partition(ds.len(), config.prep.fractions, derive_seed(seed, "partition"))?;
    ds.fit_normalization(&split.train)?;
    let (xt, yt) = ds.design(&split.train);
    let (xv, yv) = ds.design(&split.validation);
    let train_data = TrainingData::new(&xt, &yt, 2, 1)?;
    let val_data = TrainingData::new(&xv, &yv, 2, 1)?;
    let spec = config.model.spec(config.mode);
    let init_seed = derive_seed(seed, "init");
    let mut train_config = config.train.clone();
    train_config.seed = derive_seed(seed, "train");
    let (model, history) = match config.mode {
        Mode::Dnn => {
            let (net, h) = train(Network::new(spec, init_seed)?, &train_data, &val_data, &train_config)?;
            (Model::Dnn(net), h)
        }
        Mode::Mcd => {
            let net = DropoutNetwork::new(spec, config.model.dropout, init_seed)?;
            let (net, h) = train_mcd(net, &train_data, &val_data, &train_config)?;
            (Model::Mcd(net), h)
        }
        Mode::Bnn => {
            let net = BayesianNetwork::new(spec, train_data.len(), config.model.bnn, init_seed)?;
            let (net, h) = train_bnn(net, &train_data, &val_data, &train_config)?;
            (Model::Bnn(net), h)
        }
    };
    Ok(Trained {
        file: ModelFile {
            assembly: ds.assembly.clone(),
            model,
            normalization: ds.normalization.clone(),
            train_config: Some(train_config),
            history_digest: Some(history_digest(&history)?),
        },
        history,
    })
}

/// Two-stage search on one dataset; each trial trains with its own seed
/// and an epoch cap.
pub fn search(dataset: &RegressionDataset, config: &RunConfig, hpo: &HpoConfig, seed: u64) -> Result<TwoStageResult> {
    let evaluate = |hp: &Hyperparameters, trial_seed: u64| -> Result<Evaluation> {
        let trial = apply_hyperparameters(config, hp, Some(hpo.max_epochs));
        let t = train_assembly(dataset, &trial, trial_seed)?;
        let objective = t
            .history
            .best_val_loss()
            .ok_or_else(|| Error::Config("trial ran zero epochs".into()))?;
        Ok(Evaluation {
            objective,
            history_digest: t.file.history_digest,
        })
    };
    two_stage_search(
        &hpo.space,
        hpo.stage1_budget,
        hpo.stage1,
        default_stage2_grid,
        seed,
        Exec::default(),
        evaluate,
    )
}

pub fn apply_hyperparameters(config: &RunConfig, hp: &Hyperparameters, max_epochs: Option<usize>) -> RunConfig {
    let mut c = config.clone();
    c.model.hidden = hp.hidden.clone();
    c.train.learning_rate = hp.learning_rate;
    c.train.batch_size = hp.batch_size;
    if let Some(e) = max_epochs {
        c.train.max_epochs = e;
    }
    c
}

/// One prediction point.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub cycle_id: String,
    pub bank_mm: f64,
    pub z_mm: f64,
}

/// Predict in physical units.
pub fn predict(
    file: &ModelFile,
    queries: &[Query],
    passes: usize,
    level: f64,
    seed: u64,
) -> Result<PredictiveDistribution> {
    let norm = file
        .normalization
        .as_ref()
        .ok_or_else(|| Error::ModelFormat("model has no normalization state".into()))?;
    let mut x = Vec::with_capacity(2 * queries.len());
    for q in queries {
        x.extend(norm.apply_input(&[q.bank_mm, q.z_mm]));
    }
    let p = file
        .model
        .predict(&x, queries.len(), passes, level, seed, Exec::default())?;
    Ok(p.denormalize(&norm.target))
}

/// Axial grid of the reference core.
pub fn reference_grid() -> Vec<f64> {
    TrueFluxModel::reference(&CoreLayout::reference()).axial_grid()
}

/// One row of a prediction CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub cycle_id: String,
    pub assembly: String,
    pub bank_mm: f64,
    pub z_mm: f64,
    pub mean: f64,
    pub epistemic_std: f64,
    pub aleatoric_std: f64,
    pub total_std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn prediction_rows(assembly: &str, queries: &[Query], p: &PredictiveDistribution) -> Vec<PredictionRow> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| PredictionRow {
            cycle_id: q.cycle_id.clone(),
            assembly: assembly.to_string(),
            bank_mm: q.bank_mm,
            z_mm: q.z_mm,
            mean: p.mean[i],
            epistemic_std: p.epistemic_std[i],
            aleatoric_std: p.aleatoric_std[i],
            total_std: p.total_std[i],
            ci_low: p.ci_low[i],
            ci_high: p.ci_high[i],
        })
        .collect()
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Queries at the samples of a held-out dataset.
pub fn holdout_queries(ds: &RegressionDataset) -> Vec<Query> {
    ds.samples
        .iter()
        .map(|s| Query {
            cycle_id: s.cycle_id.clone(),
            bank_mm: s.bank_mm,
            z_mm: s.z_mm,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub assembly: String,
    pub n_points: usize,
    pub nrmse: f64,
    pub r_squared: f64,
    pub coverage: CoverageReport,
    pub epistemic_coverage: CoverageReport,
    /// Mean of `(ci_high - ci_low) / mean` over points.
    pub mean_relative_width: f64,
    pub per_cycle: AssemblyScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub level: f64,
    pub assemblies: Vec<AssemblyReport>,
}

/// Score predictions against measured (decay-corrected) counts.
pub fn evaluate(rows: &[PredictionRow], truth: &[RegressionDataset], level: f64) -> Result<Report> {
    let mut index: BTreeMap<(String, String, u64), f64> = BTreeMap::new();
    for ds in truth {
        for s in &ds.samples {
            index.insert((s.assembly.clone(), s.cycle_id.clone(), s.z_mm.to_bits()), s.y_raw);
        }
    }
    let mut by_assembly: BTreeMap<&str, Vec<(&PredictionRow, f64)>> = BTreeMap::new();
    for r in rows {
        let key = (r.assembly.clone(), r.cycle_id.clone(), r.z_mm.to_bits());
        let y = *index.get(&key).ok_or_else(|| {
            Error::Data(format!(
                "no measurement for {} cycle {} at z = {}",
                r.assembly, r.cycle_id, r.z_mm
            ))
        })?;
        by_assembly.entry(&r.assembly).or_default().push((r, y));
    }
    let z = fluxnet_core::predictive::z_score(level)?;
    let mut assemblies = Vec::new();
    for (assembly, pairs) in by_assembly {
        let pred: Vec<f64> = pairs.iter().map(|(r, _)| r.mean).collect();
        let target: Vec<f64> = pairs.iter().map(|(_, y)| *y).collect();
        let covered = |std: &dyn Fn(&PredictionRow) -> f64| -> CoverageReport {
            let n_covered = pairs.iter().filter(|(r, y)| (y - r.mean).abs() <= z * std(r)).count();
            CoverageReport {
                level,
                n_points: pairs.len(),
                n_covered,
                coverage: n_covered as f64 / pairs.len() as f64,
            }
        };
        let mut cycles: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (r, y) in &pairs {
            let e = cycles.entry(r.cycle_id.clone()).or_default();
            e.0.push(r.mean);
            e.1.push(*y);
        }
        let per_cycle: Vec<CycleError> = cycles
            .into_iter()
            .map(|(cycle_id, (p, t))| {
                Ok(CycleError {
                    cycle_id,
                    nrmse: nrmse(&p, &t)?,
                })
            })
            .collect::<Result<_>>()?;
        let boxes = boxplot_summary(&BTreeMap::from([(assembly.to_string(), per_cycle)]))?;
        let width = pairs
            .iter()
            .map(|(r, _)| (r.ci_high - r.ci_low) / r.mean.abs().max(f64::MIN_POSITIVE))
            .sum::<f64>()
            / pairs.len() as f64;
        assemblies.push(AssemblyReport {
            assembly: assembly.to_string(),
            n_points: pairs.len(),
            nrmse: nrmse(&pred, &target)?,
            r_squared: r_squared(&pred, &target)?,
            coverage: covered(&|r| r.total_std),
            epistemic_coverage: covered(&|r| r.epistemic_std),
            mean_relative_width: width,
            per_cycle: boxes.into_iter().next().expect("one assembly"),
        });
    }
    Ok(Report { level, assemblies })
}
