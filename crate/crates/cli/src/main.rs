use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluxnet::pipeline::{predict, prediction_rows, reference_grid, write_predictions, PredictionRow, Query};
use fluxnet::run::{assemblies, predict_seed, run_stages, StageOutcome, STAGES};
use fluxnet::RunConfig;
use fluxnet_core::modelio::{Mode, ModelFile};
use fluxnet_core::rng::derive_seed;
use fluxnet_core::{Error, Result};

/// Neutron flux surrogate pipeline.
#[derive(Parser)]
#[command(name = "fluxnet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (.toml or .json). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model mode, overrides the config.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the measurement campaign.
    Gen,
    /// Decay-correct, filter and split into per-assembly datasets.
    Prep,
    /// Two-stage hyperparameter search.
    Hpo,
    /// Train one model per assembly.
    Train,
    /// Predict held-out cycles, or a single bank position with --bank.
    Predict(PredictArgs),
    /// Score predictions against held-out measurements.
    Eval,
    /// Every stage in order.
    Run,
}

#[derive(Args)]
struct PredictArgs {
    /// Control bank position in mm; predicts the reference axial grid.
    #[arg(long)]
    bank: Option<f64>,
    /// Assembly for --bank queries; all configured assemblies by default.
    #[arg(long)]
    assembly: Option<String>,
    /// Output CSV for --bank queries; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the Monte Carlo passes, overrides the config.
    #[arg(long)]
    predict_seed: Option<u64>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(mode) = common.mode {
        config = config.for_mode(mode);
    }
    if let Some(dir) = &common.out_dir {
        config.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn init_workers() -> Result<()> {
    let Ok(value) = std::env::var("FLUXNET_WORKERS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("FLUXNET_WORKERS must be a positive integer, got {value:?}")))?;
    if n == 0 {
        return Err(Error::Config("FLUXNET_WORKERS must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(())
}

fn report(outcomes: &[StageOutcome]) {
    for o in outcomes {
        eprintln!("{:<8} {}", o.name, if o.skipped { "up to date" } else { "done" });
    }
}

fn predict_bank(config: &RunConfig, args: &PredictArgs, bank: f64) -> Result<()> {
    let names = match &args.assembly {
        Some(a) => vec![a.clone()],
        None => assemblies(config),
    };
    let seed = predict_seed(config);
    let mut rows: Vec<PredictionRow> = Vec::new();
    for a in &names {
        let path = config.out_dir.join(format!("models/{a}.model"));
        let file = ModelFile::load(&path, Some(config.mode))?;
        let queries: Vec<Query> = reference_grid()
            .into_iter()
            .map(|z_mm| Query {
                cycle_id: "query".into(),
                bank_mm: bank,
                z_mm,
            })
            .collect();
        let p = predict(
            &file,
            &queries,
            config.predict.passes,
            config.predict.level,
            derive_seed(seed, a),
        )?;
        rows.extend(prediction_rows(a, &queries, &p));
    }
    match &args.out {
        Some(path) => write_predictions(path, &rows),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    init_workers()?;
    let mut config = load_config(&cli.common)?;
    let stage = match &cli.command {
        Command::Gen => "gen",
        Command::Prep => "prep",
        Command::Hpo => {
            config.hpo.enabled = true;
            "hpo"
        }
        Command::Train => "train",
        Command::Predict(args) => {
            if let Some(s) = args.predict_seed {
                config.predict.seed = Some(s);
            }
            if let Some(bank) = args.bank {
                return predict_bank(&config, args, bank);
            }
            "predict"
        }
        Command::Eval => "eval",
        Command::Run => {
            let (_, outcomes) = run_stages(&config, &STAGES)?;
            report(&outcomes);
            return Ok(());
        }
    };
    let (_, outcomes) = run_stages(&config, &[stage])?;
    report(&outcomes);
    Ok(())
}

/// The reader of stdout went away, e.g. `| head`.
fn broken_pipe(e: &Error) -> bool {
    let io = match e {
        Error::Io(io) => Some(io),
        Error::Csv(c) => match c.kind() {
            csv::ErrorKind::Io(io) => Some(io),
            _ => None,
        },
        _ => None,
    };
    io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
