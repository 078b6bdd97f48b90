//! Neural sequence taggers on top of `numgrad`: a transformer encoder, a
//! BiLSTM and a BERT-style subword encoder, with their training loop.

mod bertlike;
mod bilstm;
mod embeddings;
mod layers;
mod train;
mod transformer;

pub use bertlike::{composite_loss, BertLikeConfig, BertLikeTagger};
pub use bilstm::{lstm_step, BiLstmConfig, BiLstmTagger};
pub use embeddings::load_embeddings;
pub use layers::{encoder_layer, init_encoder_layer, multi_head_attention, sinusoidal_pe, Attention};
pub use train::{select_checkpoint, train_tagger, EpochRecord, LrDecay, OptimizerSpec, TrainConfig, TrainRun};
pub use transformer::{TransformerConfig, TransformerTagger};

use thiserror::Error;

use crate::corpus::{CorpusError, Sentence, Vocab};
use crate::numgrad::{NumError, ParamStore, Rng, Tape, Var};
use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("invalid tagger config: {0}")]
    Config(String),
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("batch has no active positions")]
    NoActivePositions,
    #[error("sentence of {len} positions exceeds the positional table of {maxlen}")]
    TooLong { len: usize, maxlen: usize },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Row-major `[rows × width]` ids with per-row true lengths. Positions at or
/// beyond a row's length are padding and are never attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl SeqBatch {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn keep_row(&self, r: usize) -> Vec<bool> {
        (0..self.width).map(|p| p < self.lengths[r]).collect()
    }

    /// True at real positions, row-major.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.rows()).flat_map(|r| self.keep_row(r)).collect()
    }

    /// Word-level batch padded with [`Vocab::PAD_IDX`] to the longest row.
    pub fn from_words(vocab: &Vocab, sentences: &[Vec<&str>]) -> Self {
        let width = sentences.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![Vocab::PAD_IDX; sentences.len() * width];
        for (r, s) in sentences.iter().enumerate() {
            for (p, w) in s.iter().enumerate() {
                ids[r * width + p] = vocab.token_index(w);
            }
        }
        SeqBatch {
            ids,
            lengths: sentences.iter().map(Vec::len).collect(),
            width,
        }
    }
}

/// Full-batch normalizers, so that losses of separately taped chunks add up
/// to the batch mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossNorm {
    /// Labelled positions of the categorical term.
    pub categorical: f64,
    /// Non-pad positions of the positional term (unused by word models).
    pub positional: f64,
}

/// Behaviour shared by the neural taggers, as used by [`train_tagger`] and
/// prediction.
pub trait SequenceTagger: Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Tag inventory; index = class id.
    fn tags(&self) -> &[String];
    /// Normalizers for a batch (counts over the whole batch).
    fn loss_norm(&self, sentences: &[&Sentence]) -> Result<LossNorm, TaggerError>;
    /// Loss of `sentences` divided by `norm`; `rng` enables dropout.
    fn chunk_loss<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        sentences: &[&Sentence],
        norm: &LossNorm,
        rng: Option<&mut Rng>,
    ) -> Result<Var, TaggerError>;
    /// Word-level tag ids for each sentence, in inference mode.
    fn predict_ids(&self, sentences: &[Vec<&str>]) -> Result<Vec<Vec<usize>>, TaggerError>;

    /// Word-level tags for each sentence. Empty sentences yield empty
    /// output and a warning.
    fn predict(&self, sentences: &[Vec<&str>]) -> Result<Vec<Vec<String>>, TaggerError> {
        let nonempty: Vec<Vec<&str>> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
        if nonempty.len() < sentences.len() {
            log::warn!("skipping {} empty sentence(s)", sentences.len() - nonempty.len());
        }
        let chunks = crate::par::map_chunks(&nonempty, PREDICT_CHUNK, |_, c| self.predict_ids(c));
        let mut flat = Vec::with_capacity(nonempty.len());
        for c in chunks {
            flat.extend(c?);
        }
        let mut flat = flat.into_iter();
        Ok(sentences
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Vec::new()
                } else {
                    let ids = flat.next().expect("one result per sentence");
                    ids.into_iter().map(|i| self.tags()[i].clone()).collect()
                }
            })
            .collect())
    }
}

const PREDICT_CHUNK: usize = 32;

/// Gold label id per word; tags outside the inventory are ignored (`-1`).
pub(crate) fn word_labels(tags: &[String], s: &Sentence) -> Vec<i64> {
    s.tokens
        .iter()
        .map(|t| tags.iter().position(|x| *x == t.ner).map_or(-1, |i| i as i64))
        .collect()
}

/// Row-wise argmax of `[rows·width × classes]` logits, cut to lengths.
pub(crate) fn argmax_rows(logits: &crate::numgrad::Tensor, lengths: &[usize], width: usize) -> Vec<Vec<usize>> {
    let am = logits.argmax_rows();
    lengths
        .iter()
        .enumerate()
        .map(|(r, &l)| am[r * width..r * width + l].to_vec())
        .collect()
}
