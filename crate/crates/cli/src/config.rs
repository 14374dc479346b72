use std::path::{Path, PathBuf};

use fluxnet_core::bnnvi::BnnConfig;
use fluxnet_core::hpo::{SearchSpace, StageOneTraining};
use fluxnet_core::mcd::DropoutConfig;
use fluxnet_core::modelio::Mode;
use fluxnet_core::nncore::{Activation, HeadKind, Loss, NetworkSpec, TrainConfig};
use fluxnet_core::preprocess::{SmoothSettings, DEFAULT_COUNT_THRESHOLD, DEFAULT_FRACTIONS};
use fluxnet_core::synthdata::{BankSampler, DefectSpec};
use fluxnet_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_cycles: usize,
    /// Expected counts per unit flux at unit radial weight.
    pub exposure: f64,
    pub banks: BankSampler,
    pub defects: Vec<DefectSpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_cycles: 86,
            exposure: 600.0,
            banks: BankSampler::default(),
            defects: Vec::new(),
        }
    }
}

/// Which dataset column the networks learn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetColumn {
    /// Smoothed counts.
    Processed,
    /// Decay-corrected counts.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub count_threshold: f64,
    pub smooth: Option<SmoothSettings>,
    /// Assemblies to build datasets for; empty means all.
    pub assemblies: Vec<String>,
    /// Number of final kept cycles held out for evaluation.
    pub holdout_cycles: usize,
    /// Train, test and validation fractions of the remaining samples.
    pub fractions: [f64; 3],
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            count_threshold: DEFAULT_COUNT_THRESHOLD,
            smooth: Some(SmoothSettings::default()),
            assemblies: vec!["E6".into(), "H3".into()],
            holdout_cycles: 10,
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: DropoutConfig,
    pub bnn: BnnConfig,
    /// Column used as the training target.
    pub target: TargetColumn,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64, 32],
            activation: Activation::Relu,
            dropout: DropoutConfig::default(),
            bnn: BnnConfig::default(),
            target: TargetColumn::Processed,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, mode: Mode) -> NetworkSpec {
        let head = match mode {
            Mode::Dnn => HeadKind::Point,
            Mode::Mcd | Mode::Bnn => HeadKind::Gaussian,
        };
        NetworkSpec::mlp(2, &self.hidden, self.activation, 1, head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoConfig {
    pub enabled: bool,
    /// Assembly whose data drives the search.
    pub assembly: String,
    pub space: SearchSpace,
    pub stage1_budget: usize,
    pub stage1: StageOneTraining,
    /// Epoch cap for each trial.
    pub max_epochs: usize,
}

impl Default for HpoConfig {
    fn default() -> Self {
        HpoConfig {
            enabled: false,
            assembly: "E6".into(),
            space: SearchSpace::default(),
            stage1_budget: 12,
            stage1: StageOneTraining::default(),
            max_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub passes: usize,
    pub level: f64,
    /// Overrides the seed derived from the master seed.
    pub seed: Option<u64>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            passes: 2000,
            level: 0.95,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub gen: GenConfig,
    pub prep: PrepConfig,
    pub hpo: HpoConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            mode: Mode::Dnn,
            out_dir: PathBuf::from("run"),
            gen: GenConfig::default(),
            prep: PrepConfig::default(),
            hpo: HpoConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                loss: Loss::Mae,
                learning_rate: 1e-3,
                batch_size: 64,
                max_epochs: 200,
                ..TrainConfig::default()
            },
            predict: PredictConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", path.display()));
        let (config, tree): (RunConfig, serde_json::Value) = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => (
                serde_json::from_str(&text).map_err(|e| bad(&e))?,
                serde_json::from_str(&text).map_err(|e| bad(&e))?,
            ),
            _ => (
                toml::from_str(&text).map_err(|e| bad(&e))?,
                toml::from_str(&text).map_err(|e| bad(&e))?,
            ),
        };
        let config = if tree.pointer("/train/loss").is_none() {
            let mode = config.mode;
            config.for_mode(mode)
        } else {
            config
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen.n_cycles == 0 {
            return Err(Error::Config("gen.n_cycles must be at least 1".into()));
        }
        if self.gen.exposure.is_nan() || self.gen.exposure <= 0.0 {
            return Err(Error::Config("gen.exposure must be positive".into()));
        }
        if self.prep.count_threshold.is_nan() || self.prep.count_threshold <= 0.0 {
            return Err(Error::Config("prep.count_threshold must be positive".into()));
        }
        self.model.spec(self.mode).validate()?;
        self.model.dropout.validate().map_err(config_error)?;
        self.model.bnn.validate().map_err(config_error)?;
        self.train.validate()?;
        let loss_ok = match self.mode {
            Mode::Dnn => self.train.loss != Loss::GaussianNll,
            Mode::Mcd | Mode::Bnn => self.train.loss == Loss::GaussianNll,
        };
        if !loss_ok {
            return Err(Error::Config(format!(
                "loss {:?} does not match mode {}",
                self.train.loss, self.mode
            )));
        }
        if self.predict.passes < 2 && self.mode != Mode::Dnn {
            return Err(Error::Config("predict.passes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.predict.level) {
            return Err(Error::Config("predict.level must lie in [0, 1)".into()));
        }
        if self.hpo.enabled {
            self.hpo.space.validate()?;
            if self.hpo.stage1_budget == 0 {
                return Err(Error::Config("hpo.stage1_budget must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Switch mode and pick the loss that mode needs. Files that name a
    /// loss keep it on load.
    pub fn for_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        match mode {
            Mode::Dnn => {
                if self.train.loss == Loss::GaussianNll {
                    self.train.loss = Loss::Mae;
                }
            }
            Mode::Mcd | Mode::Bnn => self.train.loss = Loss::GaussianNll,
        }
        self
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_text(name: &str, text: &str) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        RunConfig::load(&path)
    }

    #[test]
    fn mode_without_loss_gets_the_mode_loss() {
        let config = load_text("a.toml", "mode = \"bnn\"\n").unwrap();
        assert_eq!(config.train.loss, Loss::GaussianNll);
        let config = load_text("a.json", r#"{"mode": "mcd"}"#).unwrap();
        assert_eq!(config.train.loss, Loss::GaussianNll);
    }

    #[test]
    fn explicit_loss_is_kept_and_checked() {
        let err = load_text("a.toml", "mode = \"mcd\"\n[train]\nloss = \"mae\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let config = load_text("a.toml", "[train]\nloss = \"mse\"\n").unwrap();
        assert_eq!(config.train.loss, Loss::Mse);
    }

    #[test]
    fn unknown_nested_keys_are_rejected() {
        for text in [
            "[model.bnn]\nprior = 1.0\n",
            "[train.early_stop]\npatience_epochs = 3\n",
            "colour = 1\n",
        ] {
            assert!(matches!(load_text("a.toml", text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(load_text("a.toml", &text).unwrap(), RunConfig::default());
    }

    proptest::proptest! {
        #[test]
        fn edited_configs_round_trip(
            seed in proptest::prelude::any::<u64>(),
            n_cycles in 1usize..500,
            hidden in proptest::collection::vec(1usize..300, 1..4),
            lr in 1e-6..1e-1f64,
            passes in 2usize..5000,
            mode_pick in 0usize..3,
        ) {
            let mode = [Mode::Dnn, Mode::Mcd, Mode::Bnn][mode_pick];
            let mut config = RunConfig::default().for_mode(mode);
            config.seed = seed;
            config.gen.n_cycles = n_cycles;
            config.model.hidden = hidden;
            config.train.learning_rate = lr;
            config.predict.passes = passes;
            let toml_text = toml::to_string(&config).unwrap();
            proptest::prop_assert_eq!(&load_text("a.toml", &toml_text).unwrap(), &config);
            let json_text = serde_json::to_string(&config).unwrap();
            proptest::prop_assert_eq!(&load_text("a.json", &json_text).unwrap(), &config);
        }
    }
}
