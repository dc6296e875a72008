//! Command-line front end: synthetic data, training, evaluation, prediction.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jointrank::letor::{generate_synthetic, parse_letor_with_dim, write_letor, Dataset};
use jointrank::pipeline::{run_pipeline, write_traces, TruncationPolicy};
use jointrank::trainer::train;
use jointrank::{DecodeMode, Error, ModelParams};

use config::{RunConfig, SPLIT_NAMES};

#[derive(Debug, Parser)]
#[command(name = "jointrank", version, about = "Joint listwise reranking and truncation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/valid/test LETOR splits.
    GenData(Common),
    /// Train a model and save the best checkpoint with its loss history.
    Train(Common),
    /// Score a held-out split and write a per-query metric report.
    Eval(Decoding),
    /// Decode a LETOR file into one JSON trace line per query.
    Predict(Decoding),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Decoding {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "model", value_name = "model|fixed:<x>|oracle")]
    policy: TruncationPolicy,
    #[arg(long, default_value = "full", value_name = "full|rerank_only|fast|truncate_only")]
    mode: DecodeMode,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Self::Usage(msg),
            other => Self::Runtime(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    Ok(config)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(common) => gen_data(&load(&common)?, common.out),
        Command::Train(common) => train_cmd(&load(&common)?, common.out),
        Command::Eval(d) => eval(&load(&d.common)?, d.common.out, d.policy, d.mode),
        Command::Predict(d) => predict(&load(&d.common)?, d.common.out, d.policy, d.mode),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(Error::from)?))
}

fn read_dataset(path: &Path, feature_dim: usize) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open data file {}: {e}", path.display())))?;
    let dim = (feature_dim > 0).then_some(feature_dim);
    Ok(parse_letor_with_dim(BufReader::new(file), dim)?)
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn gen_data(config: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out.unwrap_or_else(|| config.paths.data_dir.clone());
    let dataset = generate_synthetic(&config.data.spec())?;
    let splits = dataset.split(&config.data.splits)?;
    for (name, split) in SPLIT_NAMES.iter().zip(&splits) {
        let path = dir.join(format!("{name}.txt"));
        let mut sink = create(&path)?;
        write_letor(split, &mut sink)?;
        sink.flush().map_err(Error::from)?;
        println!("{name}: {} queries -> {}", split.groups.len(), path.display());
    }
    Ok(())
}

fn train_cmd(config: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let (train_path, valid_path) = (config.paths.split("train"), config.paths.split("valid"));
    require(&train_path, "training data")?;
    require(&valid_path, "validation data")?;
    let train_set = read_dataset(&train_path, config.model.feature_dim)?;
    let valid = read_dataset(&valid_path, train_set.feature_dim)?;
    let mut model = config.model.clone();
    model.feature_dim = train_set.feature_dim;

    let outcome = train(&train_set, Some(&valid), &model, &config.train_config())?;
    let checkpoint = out.unwrap_or_else(|| config.paths.checkpoint.clone());
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    outcome.best_params.save(&checkpoint)?;
    let history = config.paths.history_for(&checkpoint);
    let mut sink = create(&history)?;
    sink.write_all(outcome.history_csv().as_bytes()).map_err(Error::from)?;
    sink.flush().map_err(Error::from)?;
    println!(
        "best epoch {} -> {}; history -> {}",
        outcome.best_epoch,
        checkpoint.display(),
        history.display()
    );
    Ok(())
}

fn load_model(config: &RunConfig) -> Result<ModelParams, CliError> {
    require(&config.paths.checkpoint, "checkpoint")?;
    Ok(ModelParams::load(&config.paths.checkpoint)?)
}

fn eval(config: &RunConfig, out: Option<PathBuf>, policy: TruncationPolicy, mode: DecodeMode) -> Result<(), CliError> {
    let params = load_model(config)?;
    let test_path = config.paths.split("test");
    require(&test_path, "test data")?;
    let test = read_dataset(&test_path, params.config.feature_dim)?;
    let output = run_pipeline(&test, &params, policy, mode)?;
    let report = out.unwrap_or_else(|| config.paths.report.clone());
    let mut sink = create(&report)?;
    sink.write_all(output.report.to_csv().as_bytes()).map_err(Error::from)?;
    sink.flush().map_err(Error::from)?;
    let mean = &output.report.mean;
    println!(
        "policy {policy}, mode {mode}: ndcg@5 {:.4}, tdcg {:.4}, length {:.2} -> {}",
        mean.ndcg5,
        mean.tdcg,
        mean.output_length,
        report.display()
    );
    Ok(())
}

fn predict(config: &RunConfig, out: Option<PathBuf>, policy: TruncationPolicy, mode: DecodeMode) -> Result<(), CliError> {
    let params = load_model(config)?;
    let input = config.paths.input.clone().unwrap_or_else(|| config.paths.split("test"));
    require(&input, "input data")?;
    let data = read_dataset(&input, params.config.feature_dim)?;
    let output = run_pipeline(&data, &params, policy, mode)?;
    let path = out.unwrap_or_else(|| config.paths.traces.clone());
    let mut sink = create(&path)?;
    write_traces(&output.lists, &output.traces, &mut sink)?;
    sink.flush().map_err(Error::from)?;
    println!("{} traces -> {}", output.traces.len(), path.display());
    Ok(())
}
