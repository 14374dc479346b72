//! Full pipeline with digest-gated stage reuse.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fluxnet_core::hpo::Hyperparameters;
use fluxnet_core::modelio::{sha256_hex, ModelFile};
use fluxnet_core::preprocess::{read_dataset_csv, write_dataset_csv};
use fluxnet_core::rng::derive_seed;
use fluxnet_core::synthdata::{Campaign, CoreLayout};
use fluxnet_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{file_digest, RunManifest, StageRecord};
use crate::pipeline::{
    apply_hyperparameters, evaluate, generate, holdout_queries, predict, prediction_rows, prepare, read_predictions,
    search, stage_seed, train_assembly, write_predictions,
};

pub const MANIFEST_FILE: &str = "manifest.json";

/// How a stage ended in this invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub name: String,
    pub skipped: bool,
}

struct Runner<'a> {
    root: &'a Path,
    previous: Option<RunManifest>,
    manifest: RunManifest,
    outcomes: Vec<StageOutcome>,
    selected: &'a [&'a str],
}

impl Runner<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn digest_all(&self, files: &[String]) -> Result<BTreeMap<String, String>> {
        files
            .iter()
            .map(|f| Ok((f.clone(), file_digest(&self.path(f))?)))
            .collect()
    }

    fn stage<S, F>(&mut self, name: &str, settings: &S, seed: u64, inputs: &[String], run: F) -> Result<()>
    where
        S: Serialize,
        F: FnOnce(&Path) -> Result<Vec<String>>,
    {
        if !self.selected.contains(&name) {
            if let Some(record) = self.previous.as_ref().and_then(|m| m.stage(name)) {
                self.manifest.stages.push(record.clone());
            }
            return Ok(());
        }
        let inputs = self.digest_all(inputs)?;
        let key = sha256_hex(&serde_json::to_vec(&json!({
            "stage": name,
            "settings": settings,
            "seed": seed,
            "inputs": inputs,
        }))?);
        let reusable = self
            .previous
            .as_ref()
            .and_then(|m| m.stage(name))
            .filter(|r| r.key == key)
            .filter(|r| {
                r.outputs
                    .iter()
                    .all(|(f, d)| file_digest(&self.path(f)).map(|x| &x == d).unwrap_or(false))
            })
            .cloned();
        if let Some(record) = reusable {
            self.manifest.stages.push(record);
            self.outcomes.push(StageOutcome {
                name: name.into(),
                skipped: true,
            });
            return Ok(());
        }
        let start = Instant::now();
        let outputs = match run(self.root) {
            Ok(o) => o,
            Err(e) => {
                self.manifest.save(&self.path(MANIFEST_FILE))?;
                return Err(e);
            }
        };
        let outputs = self.digest_all(&outputs)?;
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            key,
            seed,
            inputs,
            outputs,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.outcomes.push(StageOutcome {
            name: name.into(),
            skipped: false,
        });
        Ok(())
    }
}

/// Assemblies a run covers.
pub fn assemblies(config: &RunConfig) -> Vec<String> {
    if config.prep.assemblies.is_empty() {
        CoreLayout::reference().ids().map(str::to_string).collect()
    } else {
        config.prep.assemblies.clone()
    }
}

fn ensure_dir(root: &Path, rel: &str) -> Result<()> {
    std::fs::create_dir_all(root.join(rel))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Seed used by the predict stage.
pub fn predict_seed(config: &RunConfig) -> u64 {
    config
        .predict
        .seed
        .unwrap_or_else(|| stage_seed(config.seed, "predict"))
}

pub const STAGES: [&str; 6] = ["gen", "prep", "hpo", "train", "predict", "eval"];

/// Run every stage in order, reusing stages whose key and outputs match
/// the previous manifest in `config.out_dir`.
pub fn run_pipeline(config: &RunConfig) -> Result<(RunManifest, Vec<StageOutcome>)> {
    run_stages(config, &STAGES)
}

/// Run the `selected` stages in pipeline order. Records of other stages are
/// carried over from the previous manifest.
pub fn run_stages(config: &RunConfig, selected: &[&str]) -> Result<(RunManifest, Vec<StageOutcome>)> {
    if let Some(bad) = selected.iter().find(|s| !STAGES.contains(s)) {
        return Err(Error::Config(format!("unknown stage {bad}")));
    }
    config.validate()?;
    if config.prep.holdout_cycles == 0 {
        return Err(Error::Config(
            "prep.holdout_cycles must be at least 1 for a full run".into(),
        ));
    }
    let root = config.out_dir.as_path();
    std::fs::create_dir_all(root)?;
    let config_hash = sha256_hex(&serde_json::to_vec(config)?);
    let mut runner = Runner {
        root,
        previous: RunManifest::load(&root.join(MANIFEST_FILE)),
        manifest: RunManifest::new(config_hash),
        outcomes: Vec::new(),
        selected,
    };
    let names = assemblies(config);
    let data = |a: &str| format!("data/{a}.csv");
    let held = |a: &str| format!("holdout/{a}.csv");
    let model = |a: &str| format!("models/{a}.model");
    let pred = |a: &str| format!("pred/{a}.csv");

    runner.stage("gen", &config.gen, stage_seed(config.seed, "gen"), &[], |root| {
        let campaign = generate(&config.gen, stage_seed(config.seed, "gen"))?;
        campaign.save(&root.join("campaign.json"))?;
        Ok(vec!["campaign.json".into()])
    })?;

    runner.stage("prep", &config.prep, 0, &["campaign.json".into()], |root| {
        let campaign = Campaign::load(&root.join("campaign.json"))?;
        let prepared = prepare(&campaign, &config.prep)?;
        ensure_dir(root, "data")?;
        ensure_dir(root, "holdout")?;
        let mut out = Vec::new();
        for (ds, h) in prepared.datasets.iter().zip(&prepared.holdout) {
            if !names.contains(&ds.assembly) {
                continue;
            }
            write_dataset_csv(&root.join(data(&ds.assembly)), ds)?;
            write_dataset_csv(&root.join(held(&h.assembly)), h)?;
            out.push(data(&ds.assembly));
            out.push(held(&h.assembly));
        }
        write_json(
            &root.join("prep.json"),
            &json!({
                "kept_cycles": prepared.kept_cycles,
                "rejected_cycles": prepared.rejected_cycles,
                "holdout_cycles": prepared.holdout_cycles,
                "sensitivity": prepared.sensitivity,
            }),
        )?;
        out.push("prep.json".into());
        Ok(out)
    })?;

    let mut train_inputs: Vec<String> = names.iter().map(|a| data(a)).collect();
    if config.hpo.enabled {
        let settings = json!({
            "hpo": config.hpo, "model": config.model, "train": config.train,
            "mode": config.mode, "fractions": config.prep.fractions,
        });
        let seed = stage_seed(config.seed, "hpo");
        runner.stage("hpo", &settings, seed, &[data(&config.hpo.assembly)], |root| {
            let ds = read_dataset_csv(&root.join(data(&config.hpo.assembly)))?;
            let result = search(&ds, config, &config.hpo, seed)?;
            ensure_dir(root, "hpo")?;
            write_json(&root.join("hpo/trials.json"), &result)?;
            Ok(vec!["hpo/trials.json".into()])
        })?;
        train_inputs.push("hpo/trials.json".into());
    }

    let train_settings = json!({
        "model": config.model, "train": config.train, "mode": config.mode,
        "fractions": config.prep.fractions,
    });
    let train_seed = stage_seed(config.seed, "train");
    runner.stage("train", &train_settings, train_seed, &train_inputs, |root| {
        let mut effective = config.clone();
        if config.hpo.enabled {
            let text = std::fs::read_to_string(root.join("hpo/trials.json"))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let hp: Hyperparameters = serde_json::from_value(v["best"]["hyperparameters"].clone())?;
            effective = apply_hyperparameters(config, &hp, None);
        }
        ensure_dir(root, "models")?;
        let mut out = Vec::new();
        for a in &names {
            let ds = read_dataset_csv(&root.join(data(a)))?;
            let trained = train_assembly(&ds, &effective, derive_seed(train_seed, a))?;
            trained.file.save(&root.join(model(a)))?;
            let history = format!("models/{a}.history.json");
            write_json(&root.join(&history), &trained.history)?;
            out.push(model(a));
            out.push(history);
        }
        Ok(out)
    })?;

    let seed = predict_seed(config);
    let predict_inputs: Vec<String> = names.iter().flat_map(|a| [model(a), held(a)]).collect();
    let predict_settings = json!({ "predict": config.predict, "mode": config.mode });
    runner.stage("predict", &predict_settings, seed, &predict_inputs, |root| {
        ensure_dir(root, "pred")?;
        let mut out = Vec::new();
        for a in &names {
            let file = ModelFile::load(&root.join(model(a)), Some(config.mode))?;
            let truth = read_dataset_csv(&root.join(held(a)))?;
            let queries = holdout_queries(&truth);
            let p = predict(
                &file,
                &queries,
                config.predict.passes,
                config.predict.level,
                derive_seed(seed, a),
            )?;
            write_predictions(&root.join(pred(a)), &prediction_rows(a, &queries, &p))?;
            out.push(pred(a));
        }
        Ok(out)
    })?;

    let eval_inputs: Vec<String> = names.iter().flat_map(|a| [pred(a), held(a)]).collect();
    runner.stage(
        "eval",
        &json!({ "level": config.predict.level }),
        0,
        &eval_inputs,
        |root| {
            let mut rows = Vec::new();
            let mut truth = Vec::new();
            for a in &names {
                rows.extend(read_predictions(&root.join(pred(a)))?);
                truth.push(read_dataset_csv(&root.join(held(a)))?);
            }
            let report = evaluate(&rows, &truth, config.predict.level)?;
            write_json(&root.join("report.json"), &report)?;
            Ok(vec!["report.json".into()])
        },
    )?;

    runner.manifest.save(&root.join(MANIFEST_FILE))?;
    Ok((runner.manifest, runner.outcomes))
}
