use rand::seq::SliceRandom;

use super::{CorpusError, Sentence, Vocab};
use crate::numgrad::seeded_rng;

/// Label id at padded positions.
pub const LABEL_PAD: i64 = -1;

/// Seeded shuffle, then the first `floor(ratio·N)` sentences train.
pub fn split(corpus: &[Sentence], ratio: f64, seed: u64) -> Result<(Vec<Sentence>, Vec<Sentence>), CorpusError> {
    if corpus.len() < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::Split {
            len: corpus.len(),
            ratio,
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let n_train = (ratio * corpus.len() as f64).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Word-level model input: `[rows × maxlen]` id and label matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub input_ids: Vec<usize>,
    pub label_ids: Vec<i64>,
    pub lengths: Vec<usize>,
    pub maxlen: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn input_row(&self, r: usize) -> &[usize] {
        &self.input_ids[r * self.maxlen..(r + 1) * self.maxlen]
    }

    pub fn label_row(&self, r: usize) -> &[i64] {
        &self.label_ids[r * self.maxlen..(r + 1) * self.maxlen]
    }

    /// True at real (non-pad) positions, row-major.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&l| (0..self.maxlen).map(move |p| p < l))
            .collect()
    }
}

/// Pads ids with `pad_idx` and labels with [`LABEL_PAD`] up to `maxlen`.
///
/// Sentences longer than `maxlen` are an error unless `truncate` is set.
/// Tags missing from the vocabulary are an error.
pub fn pad_batch(sentences: &[&Sentence], vocab: &Vocab, maxlen: usize, truncate: bool) -> Result<Batch, CorpusError> {
    let mut input_ids = vec![vocab.pad_idx(); sentences.len() * maxlen];
    let mut label_ids = vec![LABEL_PAD; sentences.len() * maxlen];
    let mut lengths = Vec::with_capacity(sentences.len());
    for (r, s) in sentences.iter().enumerate() {
        if s.len() > maxlen && !truncate {
            return Err(CorpusError::TooLong {
                id: s.id,
                len: s.len(),
                maxlen,
            });
        }
        let len = s.len().min(maxlen);
        for (p, t) in s.tokens.iter().take(len).enumerate() {
            input_ids[r * maxlen + p] = vocab.token_index(&t.word);
            let tag = vocab
                .tag_index(&t.ner)
                .ok_or_else(|| CorpusError::UnknownTag(t.ner.clone()))?;
            label_ids[r * maxlen + p] = tag as i64;
        }
        lengths.push(len);
    }
    Ok(Batch {
        input_ids,
        label_ids,
        lengths,
        maxlen,
    })
}
