use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Sentence};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioViolation {
    pub sentence_id: usize,
    pub position: usize,
    pub reason: String,
}

fn split_bio(tag: &str) -> Option<(char, &str)> {
    let (prefix, ent) = tag.split_once('-')?;
    match prefix {
        "B" | "I" if !ent.is_empty() => Some((prefix.chars().next().unwrap(), ent)),
        _ => None,
    }
}

/// Every `I-x` must follow `B-x` or `I-x`.
pub fn validate_bio(corpus: &[Sentence]) -> Vec<BioViolation> {
    let mut out = Vec::new();
    for s in corpus {
        let mut prev: Option<&str> = None;
        for (i, t) in s.tokens.iter().enumerate() {
            if let Some(('I', ent)) = split_bio(&t.ner) {
                let ok = prev.and_then(split_bio).is_some_and(|(_, prev_ent)| prev_ent == ent);
                if !ok {
                    out.push(BioViolation {
                        sentence_id: s.id,
                        position: i,
                        reason: match prev {
                            None => format!("`{}` opens the sentence", t.ner),
                            Some(p) => format!("`{}` follows `{p}`", t.ner),
                        },
                    });
                }
            }
            prev = Some(&t.ner);
        }
    }
    out
}

/// Rewrites each violating `I-x` to `B-x`.
pub fn repair_bio(corpus: &[Sentence]) -> Vec<Sentence> {
    let violations = validate_bio(corpus);
    let mut fixed = corpus.to_vec();
    let by_id: BTreeMap<usize, usize> = fixed.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    for v in violations {
        let tok = &mut fixed[by_id[&v.sentence_id]].tokens[v.position];
        if let Some(ent) = tok.ner.strip_prefix("I-") {
            tok.ner = format!("B-{ent}");
        }
    }
    fixed
}

/// Collapses `B-x`/`I-x` to the upper-cased entity `X` when `X` is kept and
/// to `O` otherwise. Already-collapsed labels (all upper-case letters) are
/// kept or dropped the same way, so the mapping is idempotent.
pub fn map_entities(corpus: &[Sentence], keep: &BTreeSet<String>) -> Result<Vec<Sentence>, CorpusError> {
    let map_tag = |tag: &str| -> Result<String, CorpusError> {
        if tag == "O" {
            return Ok("O".into());
        }
        let ent = match split_bio(tag) {
            Some((_, ent)) => ent.to_uppercase(),
            None if !tag.is_empty() && tag.chars().all(|c| c.is_ascii_uppercase()) => tag.to_string(),
            None => return Err(CorpusError::UnmappableTag(tag.to_string())),
        };
        Ok(if keep.contains(&ent) { ent } else { "O".into() })
    };
    corpus
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for t in &mut s.tokens {
                t.ner = map_tag(&t.ner)?;
            }
            Ok(s)
        })
        .collect()
}

pub fn label_histogram(corpus: &[Sentence]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for t in corpus.iter().flat_map(|s| &s.tokens) {
        *h.entry(t.ner.clone()).or_insert(0) += 1;
    }
    h
}
