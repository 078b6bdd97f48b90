use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Sentence;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Word and tag index maps. Words: `[PAD]` = 0, `[UNK]` = 1, then by
/// descending frequency with lexicographic ties. Tags use the same ordering
/// without reserved entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabLists", into = "VocabLists")]
pub struct Vocab {
    idx_to_token: Vec<String>,
    idx_to_tag: Vec<String>,
    token_to_idx: HashMap<String, usize>,
    tag_to_idx: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabLists {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl From<VocabLists> for Vocab {
    fn from(l: VocabLists) -> Self {
        Vocab::from_lists(l.tokens, l.tags)
    }
}

impl From<Vocab> for VocabLists {
    fn from(v: Vocab) -> Self {
        VocabLists {
            tokens: v.idx_to_token,
            tags: v.idx_to_tag,
        }
    }
}

fn rank(counts: BTreeMap<&str, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
    // BTreeMap iteration is lexicographic; stable sort keeps it for ties.
    v.sort_by_key(|e| std::cmp::Reverse(e.1));
    v
}

impl Vocab {
    pub const PAD_IDX: usize = 0;
    pub const UNK_IDX: usize = 1;

    pub fn build(corpus: &[Sentence], min_count: usize) -> Self {
        let mut words = BTreeMap::new();
        let mut tags = BTreeMap::new();
        for t in corpus.iter().flat_map(|s| &s.tokens) {
            *words.entry(t.word.as_str()).or_insert(0) += 1;
            *tags.entry(t.ner.as_str()).or_insert(0) += 1;
        }
        let mut idx_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        idx_to_token.extend(
            rank(words)
                .into_iter()
                .filter(|(w, c)| *c >= min_count && w != PAD_TOKEN && w != UNK_TOKEN)
                .map(|(w, _)| w),
        );
        let idx_to_tag = rank(tags).into_iter().map(|(t, _)| t).collect();
        Self::from_lists(idx_to_token, idx_to_tag)
    }

    /// Rebuilds the lookup tables from index-ordered lists.
    pub fn from_lists(idx_to_token: Vec<String>, idx_to_tag: Vec<String>) -> Self {
        let token_to_idx = idx_to_token.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let tag_to_idx = idx_to_tag.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            idx_to_token,
            idx_to_tag,
            token_to_idx,
            tag_to_idx,
        }
    }

    pub fn pad_idx(&self) -> usize {
        Self::PAD_IDX
    }

    pub fn token_index(&self, word: &str) -> usize {
        self.token_to_idx.get(word).copied().unwrap_or(Self::UNK_IDX)
    }

    pub fn contains_token(&self, word: &str) -> bool {
        self.token_to_idx.contains_key(word)
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.idx_to_token.get(idx).map(String::as_str)
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.tag_to_idx.get(tag).copied()
    }

    pub fn tag(&self, idx: usize) -> Option<&str> {
        self.idx_to_tag.get(idx).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.idx_to_token
    }

    pub fn tags(&self) -> &[String] {
        &self.idx_to_tag
    }

    pub fn num_tokens(&self) -> usize {
        self.idx_to_token.len()
    }

    pub fn num_tags(&self) -> usize {
        self.idx_to_tag.len()
    }

    /// One token per line, line number = index.
    pub fn tokens_to_text(&self) -> String {
        let mut s = self.idx_to_token.join("\n");
        s.push('\n');
        s
    }
}
