//! Linear-chain CRF: feature templates, forward–backward, Viterbi and
//! maximum-likelihood training.

mod features;
mod model;
mod train;

pub use features::{extract_features, is_digit, is_title, is_upper, sentence_features, FeatureSet};
pub use model::{CrfModel, EncodedSequence, Transition};
pub use train::{label_order, nll_and_gradient, train, CrfEpoch, CrfTrainConfig, CrfTrainData};

use thiserror::Error;

use crate::numgrad::NumError;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("label `{0}` is not in the model's label set")]
    UnknownLabel(String),
    #[error("{features} feature positions but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("malformed crf model: {0}")]
    BadModel(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid crf config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}
