use serde::{Deserialize, Serialize};

use super::layers::{dropout_opt, encoder_layer, init_embedding, init_encoder_layer, init_linear, linear, param};
use super::{word_labels, LossNorm, SeqBatch, SequenceTagger, TaggerError};
use crate::corpus::Sentence;
use crate::numgrad::{seeded_rng, ParamStore, Rng, Tape, Tensor, Var};
use crate::tokenizer::{encode_sentence, recombine_predictions, SubwordEncoding, WordPieceVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BertLikeConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub fc_dropout: f64,
    /// Size of the learned position table, `[CLS]` included.
    pub maxlen: usize,
    pub lambda_pos: f64,
}

impl Default for BertLikeConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            num_heads: 4,
            ffn_dim: 256,
            fc_dropout: 0.1,
            maxlen: 160,
            lambda_pos: 0.1,
        }
    }
}

impl BertLikeConfig {
    pub fn validate(&self) -> Result<(), TaggerError> {
        if self.hidden == 0 || self.num_heads == 0 || !self.hidden.is_multiple_of(self.num_heads) {
            return Err(TaggerError::Config(format!(
                "hidden {} must be a positive multiple of num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.fc_dropout) {
            return Err(TaggerError::Config(format!("dropout {} outside [0, 1)", self.fc_dropout)));
        }
        if !(self.lambda_pos >= 0.0) || self.maxlen < 2 {
            return Err(TaggerError::Config("need lambda_pos ≥ 0 and maxlen ≥ 2".into()));
        }
        Ok(())
    }
}

/// Subword encoder with learned positions, a tag head and a position head.
#[derive(Debug, Clone, PartialEq)]
pub struct BertLikeTagger {
    pub config: BertLikeConfig,
    pub vocab: WordPieceVocab,
    pub tags: Vec<String>,
    pub params: ParamStore,
}

/// Categorical cross-entropy over `active` positions plus `λ_pos` times the
/// cross-entropy of each non-pad position against its own index, each term
/// averaged over its positions.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    tape: &mut Tape<'_>,
    tag_logits: Var,
    pos_logits: Var,
    labels: &[i64],
    active: &[bool],
    positions: &[i64],
    lambda_pos: f64,
) -> Result<Var, TaggerError> {
    let norm = LossNorm {
        categorical: active.iter().zip(labels).filter(|(a, l)| **a && **l >= 0).count() as f64,
        positional: positions.iter().filter(|&&p| p >= 0).count() as f64,
    };
    composite_loss_normed(tape, tag_logits, pos_logits, labels, active, positions, lambda_pos, &norm)
}

#[allow(clippy::too_many_arguments)]
fn composite_loss_normed(
    tape: &mut Tape<'_>,
    tag_logits: Var,
    pos_logits: Var,
    labels: &[i64],
    active: &[bool],
    positions: &[i64],
    lambda_pos: f64,
    norm: &LossNorm,
) -> Result<Var, TaggerError> {
    if norm.categorical == 0.0 {
        return Err(TaggerError::NoActivePositions);
    }
    let cat_labels: Vec<i64> = labels.iter().zip(active).map(|(&l, &a)| if a { l } else { -1 }).collect();
    let cat = tape.cross_entropy_with_denominator(tag_logits, &cat_labels, norm.categorical)?;
    if lambda_pos == 0.0 {
        return Ok(cat);
    }
    let pos = tape.cross_entropy_with_denominator(pos_logits, positions, norm.positional)?;
    let pos = tape.scale(pos, lambda_pos);
    Ok(tape.add(cat, pos)?)
}

/// Encoded chunk ready for the forward pass.
struct Encoded {
    batch: SeqBatch,
    encodings: Vec<SubwordEncoding>,
    labels: Vec<i64>,
    active: Vec<bool>,
    positions: Vec<i64>,
}

impl BertLikeTagger {
    pub fn new(config: BertLikeConfig, vocab: WordPieceVocab, tags: Vec<String>, seed: u64) -> Result<Self, TaggerError> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let h = config.hidden;
        let mut params = ParamStore::new();
        params.insert("tok_emb", init_embedding(&mut rng, vocab.len(), h));
        params.insert("pos_emb", init_embedding(&mut rng, config.maxlen, h));
        for l in 0..config.num_layers {
            init_encoder_layer(&mut params, &mut rng, &format!("layer{l}"), h, config.ffn_dim);
        }
        init_linear(&mut params, &mut rng, "tag", h, tags.len());
        init_linear(&mut params, &mut rng, "pos", h, config.maxlen);
        Ok(Self {
            config,
            vocab,
            tags,
            params,
        })
    }

    pub fn from_parts(
        config: BertLikeConfig,
        vocab: WordPieceVocab,
        tags: Vec<String>,
        params: ParamStore,
    ) -> Result<Self, TaggerError> {
        config.validate()?;
        Ok(Self {
            config,
            vocab,
            tags,
            params,
        })
    }

    /// Final hidden states `[rows·width × hidden]`, before the heads.
    pub fn encode<'p>(&'p self, tape: &mut Tape<'p>, batch: &SeqBatch) -> Result<Var, TaggerError> {
        self.encode_with(tape, &self.params, batch)
    }

    /// As [`Self::encode`] with weights taken from `params`.
    pub fn encode_with<'p>(&self, tape: &mut Tape<'p>, params: &'p ParamStore, batch: &SeqBatch) -> Result<Var, TaggerError> {
        if batch.width > self.config.maxlen {
            return Err(TaggerError::TooLong {
                len: batch.width,
                maxlen: self.config.maxlen,
            });
        }
        let tok = param(tape, params, "tok_emb")?;
        let tok = tape.gather(tok, &batch.ids)?;
        let h = self.config.hidden;
        let pad_zero: Vec<f64> = batch
            .ids
            .iter()
            .flat_map(|&id| std::iter::repeat_n(if id == WordPieceVocab::PAD_ID { 0.0 } else { 1.0 }, h))
            .collect();
        let tok = tape.mul_const(tok, Tensor::new(vec![batch.ids.len(), h], pad_zero)?)?;
        let pos = param(tape, params, "pos_emb")?;
        let pos_ids: Vec<usize> = (0..batch.rows()).flat_map(|_| 0..batch.width).collect();
        let pos = tape.gather(pos, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..self.config.num_layers {
            x = encoder_layer(tape, params, &format!("layer{l}"), x, batch, self.config.num_heads, 0.0, None)?;
        }
        Ok(x)
    }

    /// `(tag logits [rows·width × tags], position logits [rows·width × maxlen])`.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        batch: &SeqBatch,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, Var), TaggerError> {
        self.forward_with(tape, &self.params, batch, rng)
    }

    /// As [`Self::forward`] with weights taken from `params`.
    pub fn forward_with<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamStore,
        batch: &SeqBatch,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, Var), TaggerError> {
        let x = self.encode_with(tape, params, batch)?;
        let x = dropout_opt(tape, x, self.config.fc_dropout, rng)?;
        let tags = linear(tape, params, "tag", x)?;
        let pos = linear(tape, params, "pos", x)?;
        Ok((tags, pos))
    }

    /// Encodes sentences; `truncate` drops trailing words that do not fit.
    pub fn encode_words(
        &self,
        words: &[Vec<&str>],
        labels: Option<&[Vec<i64>]>,
        truncate: bool,
    ) -> Result<Vec<SubwordEncoding>, TaggerError> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let l = labels.map(|l| l[i].as_slice());
                Ok(encode_sentence(w, l, &self.vocab, self.config.maxlen, truncate)?)
            })
            .collect()
    }

    /// Batch over the longest encoding, plus flattened loss inputs.
    fn assemble(encodings: Vec<SubwordEncoding>) -> Encoded {
        let width = encodings.iter().map(|e| e.length).max().unwrap_or(0);
        let rows = encodings.len();
        let mut ids = Vec::with_capacity(rows * width);
        let mut labels = Vec::with_capacity(rows * width);
        let mut active = Vec::with_capacity(rows * width);
        let mut positions = Vec::with_capacity(rows * width);
        for e in &encodings {
            ids.extend_from_slice(&e.ids[..width]);
            active.extend_from_slice(&e.active[..width]);
            match &e.labels {
                Some(l) => labels.extend_from_slice(&l[..width]),
                None => labels.extend(std::iter::repeat_n(-1, width)),
            }
            positions.extend((0..width).map(|p| if p < e.length { p as i64 } else { -1 }));
        }
        Encoded {
            batch: SeqBatch {
                ids,
                lengths: encodings.iter().map(|e| e.length).collect(),
                width,
            },
            encodings,
            labels,
            active,
            positions,
        }
    }

    fn encode_sentences(&self, sentences: &[&Sentence]) -> Result<Encoded, TaggerError> {
        let words: Vec<Vec<&str>> = sentences.iter().map(|s| s.words()).collect();
        let labels: Vec<Vec<i64>> = sentences.iter().map(|s| word_labels(&self.tags, s)).collect();
        Ok(Self::assemble(self.encode_words(&words, Some(&labels), true)?))
    }
}

impl SequenceTagger for BertLikeTagger {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn tags(&self) -> &[String] {
        &self.tags
    }

    fn loss_norm(&self, sentences: &[&Sentence]) -> Result<LossNorm, TaggerError> {
        let enc = self.encode_sentences(sentences)?;
        Ok(LossNorm {
            categorical: enc.active.iter().zip(&enc.labels).filter(|(a, l)| **a && **l >= 0).count() as f64,
            positional: enc.positions.iter().filter(|&&p| p >= 0).count() as f64,
        })
    }

    fn chunk_loss<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        sentences: &[&Sentence],
        norm: &LossNorm,
        rng: Option<&mut Rng>,
    ) -> Result<Var, TaggerError> {
        let enc = self.encode_sentences(sentences)?;
        let (tags, pos) = self.forward(tape, &enc.batch, rng)?;
        composite_loss_normed(
            tape,
            tags,
            pos,
            &enc.labels,
            &enc.active,
            &enc.positions,
            self.config.lambda_pos,
            norm,
        )
    }

    fn predict_ids(&self, sentences: &[Vec<&str>]) -> Result<Vec<Vec<usize>>, TaggerError> {
        let enc = Self::assemble(self.encode_words(sentences, None, false)?);
        let mut tape = Tape::new();
        let (tags, _) = self.forward(&mut tape, &enc.batch, None)?;
        let am = tape.value(tags).argmax_rows();
        let w = enc.batch.width;
        enc.encodings
            .iter()
            .enumerate()
            .map(|(r, e)| {
                let mut row = am[r * w..(r + 1) * w].to_vec();
                row.resize(e.ids.len(), 0);
                Ok(recombine_predictions(e, &row)?)
            })
            .collect()
    }
}
