//! Self-describing model files.
//!
//! A model file is a JSON envelope `{format, version, mode, sha256, payload}`
//! where `sha256` is the hex digest of the payload's canonical JSON
//! serialization. Loading re-serializes the typed payload and compares
//! digests, so edited or truncated files are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bnnvi::BayesianNetwork;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mcd::DropoutNetwork;
use crate::nncore::{NetworkSpec, TrainConfig, TrainHistory};
use crate::predictive::{z_score, PredictiveDistribution};
use crate::preprocess::NormalizationState;

pub const MODEL_FORMAT: &str = "fluxnet-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dnn,
    Mcd,
    Bnn,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dnn => "dnn",
            Mode::Mcd => "mcd",
            Mode::Bnn => "bnn",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnn" => Ok(Mode::Dnn),
            "mcd" => Ok(Mode::Mcd),
            "bnn" => Ok(Mode::Bnn),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected dnn, mcd or bnn"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "network", rename_all = "snake_case")]
pub enum Model {
    Dnn(crate::nncore::Network),
    Mcd(DropoutNetwork),
    Bnn(BayesianNetwork),
}

impl Model {
    pub fn mode(&self) -> Mode {
        match self {
            Model::Dnn(_) => Mode::Dnn,
            Model::Mcd(_) => Mode::Mcd,
            Model::Bnn(_) => Mode::Bnn,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        match self {
            Model::Dnn(n) => &n.spec,
            Model::Mcd(n) => &n.base.spec,
            Model::Bnn(n) => &n.spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Dnn(n) => n.validate(),
            Model::Mcd(n) => n.validate(),
            Model::Bnn(n) => n.validate(),
        }
    }

    /// Predictive distribution in the model's (normalized) units. The
    /// deterministic network returns its point prediction with zero spread.
    pub fn predict(
        &self,
        x: &[f64],
        batch: usize,
        passes: usize,
        level: f64,
        seed: u64,
        exec: Exec,
    ) -> Result<PredictiveDistribution> {
        match self {
            Model::Dnn(net) => {
                let z = z_score(level)?;
                let out = net.predict(x, batch)?;
                let sigma = out.sigma.unwrap_or_else(|| vec![0.0; out.mean.len()]);
                Ok(PredictiveDistribution {
                    ci_low: out.mean.iter().zip(&sigma).map(|(m, s)| m - z * s).collect(),
                    ci_high: out.mean.iter().zip(&sigma).map(|(m, s)| m + z * s).collect(),
                    epistemic_std: vec![0.0; out.mean.len()],
                    aleatoric_std: sigma.clone(),
                    total_std: sigma,
                    mean: out.mean,
                    level,
                    passes: 1,
                })
            }
            Model::Mcd(net) => net.mc_predict(x, batch, passes, level, seed, exec),
            Model::Bnn(net) => net.bnn_predict(x, batch, passes, level, seed, exec),
        }
    }
}

/// Everything needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub assembly: String,
    pub model: Model,
    pub normalization: Option<NormalizationState>,
    pub train_config: Option<TrainConfig>,
    pub history_digest: Option<String>,
}

impl ModelFile {
    pub fn mode(&self) -> Mode {
        self.model.mode()
    }

    pub fn to_json(&self) -> Result<String> {
        let payload = serde_json::to_vec(self)?;
        let envelope = serde_json::json!({
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "mode": self.mode().as_str(),
            "sha256": sha256_hex(&payload),
            "payload": serde_json::from_slice::<serde_json::Value>(&payload)?,
        });
        Ok(serde_json::to_string_pretty(&envelope)?)
    }

    /// Parse and verify a model file, optionally requiring a mode.
    pub fn from_json(text: &str, expected: Option<Mode>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Envelope {
            format: String,
            version: u32,
            mode: String,
            sha256: String,
            payload: serde_json::Value,
        }
        let env: Envelope =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(format!("not a model envelope: {e}")))?;
        if env.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!("unknown format {:?}", env.format)));
        }
        if env.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {}", env.version)));
        }
        if let Some(mode) = expected {
            if env.mode != mode.as_str() {
                return Err(Error::ModeMismatch {
                    expected: mode.to_string(),
                    found: env.mode,
                });
            }
        }
        let file: ModelFile =
            serde_json::from_value(env.payload).map_err(|e| Error::ModelFormat(format!("bad payload: {e}")))?;
        let digest = sha256_hex(&serde_json::to_vec(&file)?);
        if digest != env.sha256 {
            return Err(Error::ModelFormat("checksum mismatch".into()));
        }
        if file.mode().as_str() != env.mode {
            return Err(Error::ModelFormat(format!(
                "envelope says {} but payload holds {}",
                env.mode,
                file.mode()
            )));
        }
        file.model
            .validate()
            .map_err(|e| Error::ModelFormat(format!("invalid parameters: {e}")))?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<Mode>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, expected)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a training history's JSON form.
pub fn history_digest(history: &TrainHistory) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(history)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnnvi::BnnConfig;
    use crate::mcd::DropoutConfig;
    use crate::nncore::{Activation, HeadKind, Network};
    use crate::preprocess::ZScore;

    fn files() -> Vec<ModelFile> {
        let spec = NetworkSpec::mlp(2, &[5, 3], Activation::Relu, 1, HeadKind::Gaussian);
        let norm = NormalizationState {
            inputs: vec![
                ZScore { mean: 500.0, std: 30.0 },
                ZScore {
                    mean: 300.0,
                    std: 170.0,
                },
            ],
            target: ZScore { mean: 200.0, std: 90.0 },
        };
        let models = vec![
            Model::Dnn(Network::new(spec.clone(), 1).unwrap()),
            Model::Mcd(DropoutNetwork::new(spec.clone(), DropoutConfig::default(), 2).unwrap()),
            Model::Bnn(BayesianNetwork::new(spec, 100, BnnConfig::default(), 3).unwrap()),
        ];
        models
            .into_iter()
            .map(|model| ModelFile {
                assembly: "E6".into(),
                model,
                normalization: Some(norm.clone()),
                train_config: Some(TrainConfig::default()),
                history_digest: Some("abc".into()),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        for f in files() {
            let text = f.to_json().unwrap();
            let back = ModelFile::from_json(&text, Some(f.mode())).unwrap();
            assert_eq!(back, f);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn corrupted_payload_rejected() {
        let f = &files()[1];
        let text = f.to_json().unwrap();
        let idx = text.find("\"weights\": [").unwrap() + 20;
        let bytes = text.as_bytes();
        let digit = (idx..bytes.len())
            .find(|&i| bytes[i].is_ascii_digit() && bytes[i] != b'9')
            .unwrap();
        let mut corrupted = text.clone().into_bytes();
        corrupted[digit] += 1;
        let corrupted = String::from_utf8(corrupted).unwrap();
        assert!(matches!(
            ModelFile::from_json(&corrupted, None),
            Err(Error::ModelFormat(_))
        ));
        assert!(matches!(
            ModelFile::from_json(&text[..text.len() / 2], None),
            Err(Error::ModelFormat(_))
        ));
    }

    #[test]
    fn cross_mode_load_rejected() {
        let f = &files()[2];
        let text = f.to_json().unwrap();
        assert!(matches!(
            ModelFile::from_json(&text, Some(Mode::Mcd)),
            Err(Error::ModeMismatch { .. })
        ));
    }
}
