use std::path::Path;

use super::layers::init_embedding;
use super::TaggerError;
use crate::corpus::Vocab;
use crate::numgrad::{seeded_rng, Tensor};

/// Builds a `[tokens × dim]` table from a text file of `word v1 … v_dim`
/// lines. Vocabulary words missing from the file keep a seeded random row;
/// `[PAD]` is zero. Returns the table and the number of rows found.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocab, dim: usize, seed: u64) -> Result<(Tensor, usize), TaggerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TaggerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_embeddings(&text, vocab, dim, seed)
}

pub(crate) fn parse_embeddings(text: &str, vocab: &Vocab, dim: usize, seed: u64) -> Result<(Tensor, usize), TaggerError> {
    let mut table = init_embedding(&mut seeded_rng(seed), vocab.num_tokens(), dim);
    table.row_mut(Vocab::PAD_IDX).fill(0.0);
    let mut found = 0;
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| TaggerError::Config(format!("embedding line {}: {e}", n + 1)))?;
        if values.len() != dim {
            return Err(TaggerError::Config(format!(
                "embedding line {} has {} values, expected {dim}",
                n + 1,
                values.len()
            )));
        }
        if vocab.contains_token(word) {
            table.row_mut(vocab.token_index(word)).copy_from_slice(&values);
            found += 1;
        }
    }
    Ok((table, found))
}
