use serde::{Deserialize, Serialize};

use crate::corpus::Token;

/// Feature names for one token position, in template order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet(pub Vec<String>);

impl FeatureSet {
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Python `str.isupper`: at least one cased character and no lower-case one.
pub fn is_upper(s: &str) -> bool {
    let mut cased = false;
    for c in s.chars() {
        if c.is_lowercase() {
            return false;
        }
        cased |= c.is_uppercase();
    }
    cased
}

/// Python `str.isdigit`.
pub fn is_digit(s: &str) -> bool {
    !s.is_empty() && s.chars().all(char::is_numeric)
}

/// Python `str.istitle`: upper-case letters only after uncased characters,
/// lower-case letters only after cased ones, and at least one cased letter.
pub fn is_title(s: &str) -> bool {
    let mut prev_cased = false;
    let mut any = false;
    for c in s.chars() {
        if c.is_uppercase() {
            if prev_cased {
                return false;
            }
            prev_cased = true;
            any = true;
        } else if c.is_lowercase() {
            if !prev_cased {
                return false;
            }
            prev_cased = true;
            any = true;
        } else {
            prev_cased = false;
        }
    }
    any
}

fn suffix(s: &str, n: usize) -> &str {
    let count = s.chars().count();
    if count <= n {
        return s;
    }
    let start = s.char_indices().nth(count - n).map_or(0, |(i, _)| i);
    &s[start..]
}

/// Feature templates for position `t`: the word's lower form, 3- and
/// 2-character suffixes, upper/digit/title flags and POS tag; the previous
/// word's lower form, flags and POS tag when `t > 0`; `BEG` at the first
/// position and `END` at the last.
pub fn extract_features(tokens: &[Token], t: usize) -> FeatureSet {
    let tok = &tokens[t];
    let w = tok.word.as_str();
    let mut f = vec![
        format!("word.lower={}", w.to_lowercase()),
        format!("word[-3:]={}", suffix(w, 3)),
        format!("word[-2:]={}", suffix(w, 2)),
        format!("word.isupper={}", py_bool(is_upper(w))),
        format!("word.isdigit={}", py_bool(is_digit(w))),
        format!("word.istitle={}", py_bool(is_title(w))),
        format!("postag={}", tok.pos),
    ];
    if t > 0 {
        let p = &tokens[t - 1];
        let pw = p.word.as_str();
        f.push(format!("-1:word.lower={}", pw.to_lowercase()));
        f.push(format!("-1:word.isupper={}", py_bool(is_upper(pw))));
        f.push(format!("-1:word.isdigit={}", py_bool(is_digit(pw))));
        f.push(format!("-1:word.istitle={}", py_bool(is_title(pw))));
        f.push(format!("-1:postag={}", p.pos));
    } else {
        f.push("BEG".to_string());
    }
    if t + 1 == tokens.len() {
        f.push("END".to_string());
    }
    FeatureSet(f)
}

pub fn sentence_features(tokens: &[Token]) -> Vec<FeatureSet> {
    (0..tokens.len()).map(|t| extract_features(tokens, t)).collect()
}
