//! Experiment plumbing behind the `tagforge` binary: the JSON experiment
//! config, the model container, and one function per subcommand.

mod commands;
mod container;
mod model;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use commands::{
    cmd_curves, cmd_eval, cmd_inspect_transitions, cmd_predict, cmd_prepare, cmd_tokenize, cmd_train, prepare, PrepReport,
    Prepared, TrainSummary,
};
pub use container::{load_model, save_model, ContainerError, ModelContainer, SparseTable, FORMAT_VERSION, MAGIC};
pub use model::Model;

use crate::crf::CrfTrainConfig;
use crate::eval::Averaging;
use crate::taggers::{BertLikeConfig, BiLstmConfig, TrainConfig, TransformerConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("expected a {expected} model, found `{found}`")]
    WrongKind { expected: &'static str, found: String },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Crf(#[from] crate::crf::CrfError),
    #[error(transparent)]
    Tagger(#[from] crate::taggers::TaggerError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Crf,
    Transformer,
    Bilstm,
    Bertlike,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Crf => "crf",
            ModelKind::Transformer => "transformer",
            ModelKind::Bilstm => "bilstm",
            ModelKind::Bertlike => "bertlike",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Crf, Self::Transformer, Self::Bilstm, Self::Bertlike]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// One experiment as a single JSON document. `seed` is required; every
/// other field has a default. The top-level seed drives the split, the
/// initialization and the training order of every model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `.csv` files are read as the GMB CSV, anything else as CoNLL text.
    pub dataset: PathBuf,
    pub model: ModelKind,
    pub seed: u64,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    /// Keep only the first N sentences of the dataset.
    #[serde(default)]
    pub max_sentences: Option<usize>,
    /// Entity types to keep (e.g. `["PER", "GPE"]`); tags collapse to the
    /// entity name and everything else becomes `O`.
    #[serde(default)]
    pub entity_map: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub repair_bio: bool,
    #[serde(default = "one")]
    pub min_count: usize,
    /// Pretrained word vectors for the transformer and BiLSTM.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub crf: CrfTrainConfig,
    #[serde(default)]
    pub transformer: TransformerConfig,
    #[serde(default)]
    pub bilstm: BiLstmConfig,
    #[serde(default)]
    pub bertlike: BertLikeConfig,
    /// Neural training settings; the per-kind defaults apply when absent.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default = "yes")]
    pub include_o: bool,
    #[serde(default)]
    pub keep_best_only: bool,
    /// Not part of the model snapshot, so reruns into different
    /// directories produce identical files.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

fn default_ratio() -> f64 {
    0.8
}
fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>, model: ModelKind, seed: u64) -> Self {
        Self {
            dataset: dataset.into(),
            model,
            seed,
            split_ratio: default_ratio(),
            max_sentences: None,
            entity_map: None,
            repair_bio: true,
            min_count: 1,
            embeddings: None,
            crf: CrfTrainConfig::default(),
            transformer: TransformerConfig::default(),
            bilstm: BiLstmConfig::default(),
            bertlike: BertLikeConfig::default(),
            train: None,
            averaging: Averaging::default(),
            include_o: true,
            keep_best_only: false,
            output_dir: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (use --out)".into()))
    }

    /// Neural training settings with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_else(|| match self.model {
            ModelKind::Bilstm => TrainConfig::bilstm(),
            ModelKind::Bertlike => TrainConfig::bertlike(),
            ModelKind::Transformer | ModelKind::Crf => TrainConfig::transformer(),
        });
        t.seed = self.seed;
        t
    }

    pub fn crf_config(&self) -> CrfTrainConfig {
        CrfTrainConfig {
            seed: self.seed,
            ..self.crf
        }
    }

    /// Overrides the epoch count of whichever trainer the kind uses.
    pub fn set_epochs(&mut self, epochs: usize) {
        match self.model {
            ModelKind::Crf => self.crf.epochs = epochs,
            _ => {
                let mut t = self.train_config();
                t.epochs = epochs;
                self.train = Some(t);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.dataset.exists() {
            return Err(CliError::Config(format!("dataset {} does not exist", self.dataset.display())));
        }
        if let Some(e) = &self.embeddings {
            if !e.exists() {
                return Err(CliError::Config(format!("embedding file {} does not exist", e.display())));
            }
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CliError::Config(format!("split_ratio {} outside (0, 1)", self.split_ratio)));
        }
        Ok(())
    }
}
