//! WordPiece subword tokenization with label propagation and recombination.
//!
//! Words are lower-cased, split greedily into the longest known pieces
//! (continuations carry a `##` prefix), and framed by a leading `[CLS]`.
//! Only the first piece of each word is *active*: it carries the word's label
//! into the loss and its prediction becomes the word's tag.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
const SPECIALS: [&str; 4] = [PAD, UNK, CLS, MASK];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("vocab file: {0}")]
    BadVocab(String),
    #[error("sentence expands to {needed} positions, more than maxlen {maxlen}")]
    TooLong { needed: usize, maxlen: usize },
    #[error("cannot encode an empty sentence")]
    EmptySentence,
    #[error("{what}: expected {expected} entries, got {got}")]
    Alignment {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordPieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordPieceVocab {
    fn from(pieces: Vec<String>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { pieces, index }
    }
}

impl From<WordPieceVocab> for Vec<String> {
    fn from(v: WordPieceVocab) -> Self {
        v.pieces
    }
}

impl WordPieceVocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const MASK_ID: usize = 3;

    /// Builds from explicit pieces; the four specials are prepended.
    pub fn from_pieces<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen: BTreeSet<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for p in pieces {
            let p = p.into();
            if seen.insert(p.clone()) {
                list.push(p);
            }
        }
        list.into()
    }

    /// Vocabulary for a word list without learning merges: every character in
    /// both word-initial and `##` form, then every lower-cased word seen at
    /// least `min_count` times (by descending frequency, ties lexicographic).
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars = BTreeSet::new();
        for w in words {
            let w = w.to_lowercase();
            chars.extend(w.chars());
            *counts.entry(w).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by_key(|e| std::cmp::Reverse(e.1));
        let char_pieces = chars.iter().map(|c| c.to_string());
        let cont_pieces = chars.iter().map(|c| format!("##{c}"));
        Self::from_pieces(char_pieces.chain(cont_pieces).chain(ranked.into_iter().map(|(w, _)| w)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// One piece per line; line number (from 0) is the id. The specials must
    /// occupy the first four lines in the order `[PAD] [UNK] [CLS] [MASK]`.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let pieces: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::BadVocab(format!("line {} must be {s}", i + 1)));
            }
        }
        let v: Self = pieces.into();
        if v.index.len() != v.pieces.len() {
            return Err(TokenizerError::BadVocab("duplicate pieces".into()));
        }
        Ok(v)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        s
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }
}

/// Greedy longest-match-first split of one word. If any step finds no
/// matching prefix the whole word becomes `[UNK]`.
pub fn wordpiece_tokenize(word: &str, vocab: &WordPieceVocab) -> Vec<usize> {
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut buf = String::new();
    while start + 1 < bounds.len() {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            let sub = &word[bounds[start]..bounds[end]];
            buf.clear();
            if start > 0 {
                buf.push_str("##");
            }
            buf.push_str(sub);
            if let Some(id) = vocab.id(&buf) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => return vec![WordPieceVocab::UNK_ID],
        }
    }
    out
}

/// Subword view of one sentence, padded to `maxlen`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordEncoding {
    pub ids: Vec<usize>,
    /// Source word per position; `-1` at `[CLS]` and padding.
    pub word_index: Vec<i64>,
    /// True exactly at each word's first piece.
    pub active: Vec<bool>,
    /// Positions before padding, `[CLS]` included.
    pub length: usize,
    /// Per-position label ids when labels were supplied; `-1` at `[CLS]`
    /// and padding.
    pub labels: Option<Vec<i64>>,
}

impl SubwordEncoding {
    pub fn maxlen(&self) -> usize {
        self.ids.len()
    }

    pub fn num_words(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Lower-cases, splits, prepends `[CLS]` and pads to `maxlen`. Every piece
/// of a word copies the word's label; only the first piece is active. With
/// `truncate`, words that no longer fit are dropped whole.
pub fn encode_sentence(
    words: &[&str],
    labels: Option<&[i64]>,
    vocab: &WordPieceVocab,
    maxlen: usize,
    truncate: bool,
) -> Result<SubwordEncoding, TokenizerError> {
    if words.is_empty() {
        return Err(TokenizerError::EmptySentence);
    }
    if let Some(l) = labels {
        if l.len() != words.len() {
            return Err(TokenizerError::Alignment {
                what: "labels",
                expected: words.len(),
                got: l.len(),
            });
        }
    }
    let mut ids = vec![WordPieceVocab::CLS_ID];
    let mut word_index = vec![-1];
    let mut active = vec![false];
    let mut sub_labels = vec![-1];
    for (w, word) in words.iter().enumerate() {
        let pieces = wordpiece_tokenize(&word.to_lowercase(), vocab);
        if ids.len() + pieces.len() > maxlen {
            if truncate {
                break;
            }
            let needed = ids.len()
                + words[w..]
                    .iter()
                    .map(|x| wordpiece_tokenize(&x.to_lowercase(), vocab).len())
                    .sum::<usize>();
            return Err(TokenizerError::TooLong { needed, maxlen });
        }
        for (k, id) in pieces.into_iter().enumerate() {
            ids.push(id);
            word_index.push(w as i64);
            active.push(k == 0);
            sub_labels.push(labels.map_or(-1, |l| l[w]));
        }
    }
    let length = ids.len();
    ids.resize(maxlen, WordPieceVocab::PAD_ID);
    word_index.resize(maxlen, -1);
    active.resize(maxlen, false);
    sub_labels.resize(maxlen, -1);
    Ok(SubwordEncoding {
        ids,
        word_index,
        active,
        length,
        labels: labels.map(|_| sub_labels),
    })
}

/// One tag per encoded word, taken from its first (active) piece.
pub fn recombine_predictions<T: Clone>(encoding: &SubwordEncoding, subword_tags: &[T]) -> Result<Vec<T>, TokenizerError> {
    if subword_tags.len() != encoding.ids.len() {
        return Err(TokenizerError::Alignment {
            what: "subword tags",
            expected: encoding.ids.len(),
            got: subword_tags.len(),
        });
    }
    Ok(encoding
        .active
        .iter()
        .zip(subword_tags)
        .filter(|(a, _)| **a)
        .map(|(_, t)| t.clone())
        .collect())
}
