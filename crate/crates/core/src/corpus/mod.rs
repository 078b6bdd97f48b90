//! Dataset ingestion: the GMB-style CSV and CoNLL-style text, tag-scheme
//! hygiene, vocabularies, splitting and padded batches.

mod batch;
mod bio;
mod load;
mod vocab;

pub use batch::{pad_batch, split, Batch, LABEL_PAD};
pub use bio::{label_histogram, map_entities, repair_bio, validate_bio, BioViolation};
pub use load::{load_conll, load_gmb_csv, parse_conll, parse_gmb_csv, write_conll};
pub use vocab::{Vocab, PAD_TOKEN, UNK_TOKEN};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub word: String,
    pub pos: String,
    pub ner: String,
}

impl Token {
    pub fn new(word: impl Into<String>, pos: impl Into<String>, ner: impl Into<String>) -> Self {
        Self {
            word: word.into(),
            pos: pos.into(),
            ner: ner.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(id: usize, tokens: Vec<Token>) -> Self {
        Self { id, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.word.as_str()).collect()
    }

    pub fn tags(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.ner.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("corpus is empty")]
    Empty,
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("cannot map tag `{0}`")]
    UnmappableTag(String),
    #[error("split needs at least 2 sentences and 0 < ratio < 1 (got {len} sentences, ratio {ratio})")]
    Split { len: usize, ratio: f64 },
    #[error("sentence {id} has {len} tokens, longer than maxlen {maxlen}")]
    TooLong { id: usize, len: usize, maxlen: usize },
    #[error("tag `{0}` is not in the tag vocabulary")]
    UnknownTag(String),
}
