use fluxnet_core::bnnvi::{train_bnn, BayesianNetwork, BnnConfig};
use fluxnet_core::mcd::{train_mcd, DropoutConfig, DropoutNetwork};
use fluxnet_core::modelio::{Mode, Model, ModelFile};
use fluxnet_core::nncore::{train, Activation, HeadKind, Loss, Network, NetworkSpec, TrainConfig, TrainingData};
use fluxnet_core::{Error, Exec};

fn toy_data() -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..60 {
        let a = i as f64 / 30.0 - 1.0;
        let b = ((i * 7) % 60) as f64 / 30.0 - 1.0;
        x.extend([a, b]);
        y.push((1.5 * a).sin() + 0.3 * b * b);
    }
    (x, y)
}

fn trained(mode: Mode) -> ModelFile {
    let (x, y) = toy_data();
    let data = TrainingData::new(&x[..80], &y[..40], 2, 1).unwrap();
    let val = TrainingData::new(&x[80..], &y[40..], 2, 1).unwrap();
    let head = if mode == Mode::Dnn {
        HeadKind::Point
    } else {
        HeadKind::Gaussian
    };
    let spec = NetworkSpec::mlp(2, &[8, 4], Activation::Relu, 1, head);
    let config = TrainConfig {
        loss: if mode == Mode::Dnn {
            Loss::Mse
        } else {
            Loss::GaussianNll
        },
        learning_rate: 1e-2,
        batch_size: 8,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let model = match mode {
        Mode::Dnn => Model::Dnn(train(Network::new(spec, 3).unwrap(), &data, &val, &config).unwrap().0),
        Mode::Mcd => {
            let net = DropoutNetwork::new(spec, DropoutConfig::default(), 3).unwrap();
            Model::Mcd(train_mcd(net, &data, &val, &config).unwrap().0)
        }
        Mode::Bnn => {
            let net = BayesianNetwork::new(spec, data.len(), BnnConfig::default(), 3).unwrap();
            Model::Bnn(train_bnn(net, &data, &val, &config).unwrap().0)
        }
    };
    ModelFile {
        assembly: "E6".into(),
        model,
        normalization: None,
        train_config: Some(config),
        history_digest: None,
    }
}

const MODES: [Mode; 3] = [Mode::Dnn, Mode::Mcd, Mode::Bnn];

#[test]
fn saved_models_predict_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = toy_data();
    for mode in MODES {
        let file = trained(mode);
        let path = dir.path().join(format!("{mode}.model"));
        file.save(&path).unwrap();
        let loaded = ModelFile::load(&path, Some(mode)).unwrap();
        assert_eq!(loaded, file);
        let a = file.model.predict(&x, 60, 300, 0.95, 11, Exec::Parallel).unwrap();
        let b = loaded.model.predict(&x, 60, 300, 0.95, 11, Exec::Sequential).unwrap();
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.mean), bits(&b.mean), "{mode}");
        assert_eq!(bits(&a.total_std), bits(&b.total_std), "{mode}");
    }
}

#[test]
fn flipped_payload_byte_is_rejected() {
    for mode in MODES {
        let text = trained(mode).to_json().unwrap();
        let at = text.find("\"payload\"").unwrap();
        let pos = (at..text.len())
            .find(|&i| text.as_bytes()[i].is_ascii_digit() && text.as_bytes()[i] != b'9')
            .unwrap();
        let mut bytes = text.into_bytes();
        bytes[pos] += 1;
        let err = ModelFile::from_json(std::str::from_utf8(&bytes).unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::ModelFormat(_)), "{mode}: {err}");
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn loading_under_another_mode_fails() {
    for mode in MODES {
        let text = trained(mode).to_json().unwrap();
        for other in MODES.into_iter().filter(|m| *m != mode) {
            let err = ModelFile::from_json(&text, Some(other)).unwrap_err();
            assert!(matches!(err, Error::ModeMismatch { .. }), "{mode} as {other}: {err}");
            assert_eq!(err.exit_code(), 2);
        }
    }
}

#[test]
fn truncated_file_is_rejected() {
    let text = trained(Mode::Mcd).to_json().unwrap();
    let err = ModelFile::from_json(&text[..text.len() / 2], None).unwrap_err();
    assert!(matches!(err, Error::ModelFormat(_)), "{err}");
}
