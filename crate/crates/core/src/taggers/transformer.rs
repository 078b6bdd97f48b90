use serde::{Deserialize, Serialize};

use super::layers::{encoder_layer, init_embedding, init_encoder_layer, init_linear, linear, param, sinusoidal_pe, tile_rows};
use super::{argmax_rows, word_labels, LossNorm, SeqBatch, SequenceTagger, TaggerError};
use crate::corpus::{Sentence, Vocab};
use crate::numgrad::{seeded_rng, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub emb_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub maxlen: usize,
    /// Adds the sinusoidal table to the embeddings. Off only for symmetry
    /// checks.
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            emb_dim: 300,
            num_heads: 6,
            num_layers: 6,
            ffn_dim: 2048,
            dropout: 0.0,
            maxlen: 128,
            positional_encoding: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), TaggerError> {
        if self.emb_dim == 0 || self.num_heads == 0 || !self.emb_dim.is_multiple_of(self.num_heads) {
            return Err(TaggerError::Config(format!(
                "emb_dim {} must be a positive multiple of num_heads {}",
                self.emb_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TaggerError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.emb_dim.is_multiple_of(2) && self.positional_encoding {
            return Err(TaggerError::Config("sinusoidal encoding needs an even emb_dim".into()));
        }
        Ok(())
    }
}

/// Word-level transformer encoder with a per-position linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerTagger {
    pub config: TransformerConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pe: Tensor,
}

impl TransformerTagger {
    /// `embeddings`, when given, replaces the random token table and must be
    /// `[vocab tokens × emb_dim]`.
    pub fn new(config: TransformerConfig, vocab: Vocab, embeddings: Option<Tensor>, seed: u64) -> Result<Self, TaggerError> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let d = config.emb_dim;
        let mut params = ParamStore::new();
        let emb = match embeddings {
            Some(t) if t.shape() == [vocab.num_tokens(), d] => t,
            Some(t) => {
                return Err(TaggerError::Config(format!(
                    "embedding table {:?} does not match [{} × {d}]",
                    t.shape(),
                    vocab.num_tokens()
                )))
            }
            None => init_embedding(&mut rng, vocab.num_tokens(), d),
        };
        params.insert("emb", emb);
        for l in 0..config.num_layers {
            init_encoder_layer(&mut params, &mut rng, &format!("layer{l}"), d, config.ffn_dim);
        }
        init_linear(&mut params, &mut rng, "out", d, vocab.num_tags());
        Self::from_parts(config, vocab, params)
    }

    pub fn from_parts(config: TransformerConfig, vocab: Vocab, params: ParamStore) -> Result<Self, TaggerError> {
        config.validate()?;
        let pe = if config.positional_encoding {
            sinusoidal_pe(config.maxlen, config.emb_dim)?
        } else {
            Tensor::zeros(&[config.maxlen, config.emb_dim])
        };
        Ok(Self {
            config,
            vocab,
            params,
            pe,
        })
    }

    /// Logits `[rows·width × tags]`.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, batch: &SeqBatch, mut rng: Option<&mut Rng>) -> Result<Var, TaggerError> {
        if batch.width > self.config.maxlen {
            return Err(TaggerError::TooLong {
                len: batch.width,
                maxlen: self.config.maxlen,
            });
        }
        let emb = param(tape, &self.params, "emb")?;
        let mut x = tape.gather(emb, &batch.ids)?;
        if self.config.positional_encoding {
            x = tape.add_const(x, &tile_rows(&self.pe, batch.rows(), batch.width))?;
        }
        for l in 0..self.config.num_layers {
            x = encoder_layer(
                tape,
                &self.params,
                &format!("layer{l}"),
                x,
                batch,
                self.config.num_heads,
                self.config.dropout,
                rng.as_deref_mut(),
            )?;
        }
        linear(tape, &self.params, "out", x)
    }

    fn batch_of(&self, sentences: &[&Sentence]) -> (SeqBatch, Vec<i64>) {
        let words: Vec<Vec<&str>> = sentences.iter().map(|s| s.words()).collect();
        let batch = SeqBatch::from_words(&self.vocab, &words);
        let mut labels = vec![-1; batch.ids.len()];
        for (r, s) in sentences.iter().enumerate() {
            for (p, l) in word_labels(self.vocab.tags(), s).into_iter().enumerate() {
                labels[r * batch.width + p] = l;
            }
        }
        (batch, labels)
    }
}

impl SequenceTagger for TransformerTagger {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn tags(&self) -> &[String] {
        self.vocab.tags()
    }

    fn loss_norm(&self, sentences: &[&Sentence]) -> Result<LossNorm, TaggerError> {
        let n = sentences
            .iter()
            .flat_map(|s| word_labels(self.vocab.tags(), s))
            .filter(|&l| l >= 0)
            .count();
        Ok(LossNorm {
            categorical: n as f64,
            positional: 0.0,
        })
    }

    fn chunk_loss<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        sentences: &[&Sentence],
        norm: &LossNorm,
        rng: Option<&mut Rng>,
    ) -> Result<Var, TaggerError> {
        let (batch, labels) = self.batch_of(sentences);
        let logits = self.forward(tape, &batch, rng)?;
        Ok(tape.cross_entropy_with_denominator(logits, &labels, norm.categorical)?)
    }

    fn predict_ids(&self, sentences: &[Vec<&str>]) -> Result<Vec<Vec<usize>>, TaggerError> {
        let batch = SeqBatch::from_words(&self.vocab, sentences);
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, &batch, None)?;
        Ok(argmax_rows(tape.value(logits), &batch.lengths, batch.width))
    }
}
