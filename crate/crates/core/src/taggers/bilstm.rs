use serde::{Deserialize, Serialize};

use super::layers::{dropout_opt, init_embedding, init_linear, linear, param};
use super::{argmax_rows, word_labels, LossNorm, SeqBatch, SequenceTagger, TaggerError};
use crate::corpus::{Sentence, Vocab};
use crate::numgrad::{dropout_mask, xavier_uniform, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiLstmConfig {
    pub emb_dim: usize,
    pub units: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        Self {
            emb_dim: 104,
            units: 100,
            dropout: 0.1,
            recurrent_dropout: 0.1,
        }
    }
}

impl BiLstmConfig {
    pub fn validate(&self) -> Result<(), TaggerError> {
        if self.units == 0 || self.emb_dim == 0 {
            return Err(TaggerError::Config("units and emb_dim must be at least 1".into()));
        }
        for p in [self.dropout, self.recurrent_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(TaggerError::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Embedding, dropout, one LSTM per direction and a per-position dense
/// layer over the concatenated states.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmTagger {
    pub config: BiLstmConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

const DIRECTIONS: [&str; 2] = ["fw", "bw"];

/// One LSTM step on a batch. `gates_x` is the input projection `x·Wx + b`
/// (`[rows × 4u]`, gate order i, f, o, g); `h_in` is the (possibly
/// dropped-out) previous state fed to `Wh`.
pub fn lstm_step<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    gates_x: Var,
    h_in: Var,
    c: Var,
) -> Result<(Var, Var), TaggerError> {
    let wh = param(tape, store, &format!("{prefix}.wh"))?;
    let u = tape.shape(c)[1];
    let rec = tape.matmul(h_in, wh)?;
    let z = tape.add(gates_x, rec)?;
    let zi = tape.slice_cols(z, 0, u)?;
    let zf = tape.slice_cols(z, u, 2 * u)?;
    let zo = tape.slice_cols(z, 2 * u, 3 * u)?;
    let zg = tape.slice_cols(z, 3 * u, 4 * u)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let g = tape.tanh(zg);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

impl BiLstmTagger {
    pub fn new(config: BiLstmConfig, vocab: Vocab, embeddings: Option<Tensor>, seed: u64) -> Result<Self, TaggerError> {
        config.validate()?;
        let mut rng = crate::numgrad::seeded_rng(seed);
        let (e, u) = (config.emb_dim, config.units);
        let mut params = ParamStore::new();
        let emb = match embeddings {
            Some(t) if t.shape() == [vocab.num_tokens(), e] => t,
            Some(t) => {
                return Err(TaggerError::Config(format!(
                    "embedding table {:?} does not match [{} × {e}]",
                    t.shape(),
                    vocab.num_tokens()
                )))
            }
            None => init_embedding(&mut rng, vocab.num_tokens(), e),
        };
        params.insert("emb", emb);
        for dir in DIRECTIONS {
            params.insert(format!("{dir}.wx"), xavier_uniform(&mut rng, &[e, 4 * u], e, 4 * u));
            params.insert(format!("{dir}.wh"), xavier_uniform(&mut rng, &[u, 4 * u], u, 4 * u));
            params.insert(format!("{dir}.b"), Tensor::zeros(&[4 * u]));
        }
        init_linear(&mut params, &mut rng, "out", 2 * u, vocab.num_tags());
        Ok(Self { config, vocab, params })
    }

    pub fn from_parts(config: BiLstmConfig, vocab: Vocab, params: ParamStore) -> Result<Self, TaggerError> {
        config.validate()?;
        Ok(Self { config, vocab, params })
    }

    /// Runs one direction and returns its states in time order, each
    /// `[rows × units]`. Past a row's length the state is carried unchanged,
    /// so padding never reaches real positions.
    fn direction<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        dir: &str,
        x: Var,
        batch: &SeqBatch,
        reverse: bool,
        rng: Option<&mut Rng>,
    ) -> Result<Vec<Var>, TaggerError> {
        let (rows, width, u) = (batch.rows(), batch.width, self.config.units);
        let wx = param(tape, &self.params, &format!("{dir}.wx"))?;
        let b = param(tape, &self.params, &format!("{dir}.b"))?;
        let gx = tape.linear(x, wx, b)?;
        let rec_mask = match rng {
            Some(rng) if self.config.recurrent_dropout > 0.0 => {
                Some(dropout_mask(&[rows, u], self.config.recurrent_dropout, rng))
            }
            _ => None,
        };
        let mut h = tape.constant(Tensor::zeros(&[rows, u]));
        let mut c = tape.constant(Tensor::zeros(&[rows, u]));
        let mut states = vec![h; width];
        let steps: Vec<usize> = if reverse {
            (0..width).rev().collect()
        } else {
            (0..width).collect()
        };
        for t in steps {
            let idx: Vec<usize> = (0..rows).map(|r| r * width + t).collect();
            let gt = tape.gather(gx, &idx)?;
            let h_in = match &rec_mask {
                Some(m) => tape.mul_const(h, m.clone())?,
                None => h,
            };
            let (h_new, c_new) = lstm_step(tape, &self.params, dir, gt, h_in, c)?;
            let live: Vec<f64> = batch
                .lengths
                .iter()
                .flat_map(|&l| std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, u))
                .collect();
            if live.iter().all(|&m| m == 1.0) {
                h = h_new;
                c = c_new;
            } else {
                let keep = Tensor::new(vec![rows, u], live.clone())?;
                let hold = Tensor::new(vec![rows, u], live.iter().map(|m| 1.0 - m).collect())?;
                let (a, bb) = (tape.mul_const(h_new, keep.clone())?, tape.mul_const(h, hold.clone())?);
                h = tape.add(a, bb)?;
                let (a, bb) = (tape.mul_const(c_new, keep)?, tape.mul_const(c, hold)?);
                c = tape.add(a, bb)?;
            }
            states[t] = h;
        }
        Ok(states)
    }

    /// Concatenated states `[rows·width × 2·units]`, forward half first.
    pub fn hidden<'p>(&'p self, tape: &mut Tape<'p>, batch: &SeqBatch, mut rng: Option<&mut Rng>) -> Result<Var, TaggerError> {
        let (rows, width) = (batch.rows(), batch.width);
        let emb = param(tape, &self.params, "emb")?;
        let x = tape.gather(emb, &batch.ids)?;
        let x = dropout_opt(tape, x, self.config.dropout, rng.as_deref_mut())?;
        let fw = self.direction(tape, "fw", x, batch, false, rng.as_deref_mut())?;
        let bw = self.direction(tape, "bw", x, batch, true, rng)?;
        // states are time-major; reorder rows to `r·width + t`
        let order: Vec<usize> = (0..rows).flat_map(|r| (0..width).map(move |t| t * rows + r)).collect();
        let fw = tape.concat_rows(&fw)?;
        let bw = tape.concat_rows(&bw)?;
        let both = tape.concat_cols(&[fw, bw])?;
        Ok(tape.gather(both, &order)?)
    }

    /// Logits `[rows·width × tags]`.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, batch: &SeqBatch, rng: Option<&mut Rng>) -> Result<Var, TaggerError> {
        let h = self.hidden(tape, batch, rng)?;
        linear(tape, &self.params, "out", h)
    }
}

impl SequenceTagger for BiLstmTagger {
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
        let words: Vec<Vec<&str>> = sentences.iter().map(|s| s.words()).collect();
        let batch = SeqBatch::from_words(&self.vocab, &words);
        let mut labels = vec![-1; batch.ids.len()];
        for (r, s) in sentences.iter().enumerate() {
            for (p, l) in word_labels(self.vocab.tags(), s).into_iter().enumerate() {
                labels[r * batch.width + p] = l;
            }
        }
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
