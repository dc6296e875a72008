use std::path::{Path, PathBuf};

use serde::Deserialize;

use jointrank::letor::SyntheticSpec;
use jointrank::trainer::TrainConfig;
use jointrank::ModelConfig;

use crate::CliError;

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    /// Save a resumable state every this many epochs into `paths.state_dir`.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            checkpoint_every: 0,
        }
    }
}

/// Synthetic corpus written by `gen-data`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    pub grade_max: u32,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_queries: 200,
            docs_per_query: 10,
            feature_dim: 8,
            grade_max: 4,
            noise_sigma: 1.0,
            seed: 0,
            splits: [0.8, 0.1, 0.1],
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_queries: self.num_queries,
            docs_per_query: self.docs_per_query,
            feature_dim: self.feature_dim,
            grade_max: self.grade_max,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

/// File locations. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: PathBuf,
    /// Defaults to the checkpoint path with a `.history.csv` extension.
    pub history: Option<PathBuf>,
    pub state_dir: Option<PathBuf>,
    pub report: PathBuf,
    /// LETOR file scored by `predict`. Defaults to the test split.
    pub input: Option<PathBuf>,
    pub traces: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            train: None,
            valid: None,
            test: None,
            checkpoint: "model.ckpt".into(),
            history: None,
            state_dir: None,
            report: "report.csv".into(),
            input: None,
            traces: "traces.jsonl".into(),
        }
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        config.paths.rebase(&base);
        Ok(config)
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.data.seed = seed;
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            checkpoint_every: self.train.checkpoint_every,
            checkpoint_dir: self.paths.state_dir.clone(),
        }
    }
}

impl PathsSection {
    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data_dir);
        join(&mut self.checkpoint);
        join(&mut self.report);
        join(&mut self.traces);
        for p in [
            &mut self.train,
            &mut self.valid,
            &mut self.test,
            &mut self.history,
            &mut self.state_dir,
            &mut self.input,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    /// Location of a named split, by default `<data_dir>/<name>.txt`.
    pub fn split(&self, name: &str) -> PathBuf {
        let explicit = match name {
            "train" => &self.train,
            "valid" => &self.valid,
            _ => &self.test,
        };
        explicit.clone().unwrap_or_else(|| self.data_dir.join(format!("{name}.txt")))
    }

    pub fn history_for(&self, checkpoint: &Path) -> PathBuf {
        self.history
            .clone()
            .unwrap_or_else(|| checkpoint.with_extension("history.csv"))
    }
}
