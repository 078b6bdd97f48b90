use std::fmt::Write as _;
use std::path::Path;

use super::{CorpusError, Sentence, Token};

fn read_bytes(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// UTF-8 when valid, otherwise Latin-1 (every byte is its own code point).
fn decode(bytes: Vec<u8>) -> String {
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    }
}

pub fn load_gmb_csv(path: impl AsRef<Path>) -> Result<Vec<Sentence>, CorpusError> {
    parse_gmb_csv(read_bytes(path.as_ref())?)
}

/// Parses `sentence-marker,word,pos,tag` rows, forward-filling the marker.
///
/// Columns are located by header name (`Sentence #`, `Word`, `POS`, `Tag`,
/// case-insensitive); extra columns are ignored.
pub fn parse_gmb_csv(bytes: Vec<u8>) -> Result<Vec<Sentence>, CorpusError> {
    let text = decode(bytes);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |pred: &dyn Fn(&str) -> bool, name: &'static str| {
        headers
            .iter()
            .position(|h| pred(&h.trim().to_ascii_lowercase()))
            .ok_or(CorpusError::MissingColumn(name))
    };
    let c_sent = find(&|h| h.starts_with("sentence"), "Sentence #")?;
    let c_word = find(&|h| h == "word" || h == "token", "Word")?;
    let c_pos = find(&|h| h == "pos", "POS")?;
    let c_tag = find(&|h| h == "tag" || h == "ner", "Tag")?;

    let mut sentences: Vec<Sentence> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let marker = field(c_sent).trim();
        let word = field(c_word);
        if word.is_empty() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "empty word".into(),
            });
        }
        if !marker.is_empty() {
            sentences.push(Sentence::new(sentences.len(), Vec::new()));
        }
        let Some(current) = sentences.last_mut() else {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "first row has no sentence marker".into(),
            });
        };
        current
            .tokens
            .push(Token::new(word, field(c_pos).trim(), field(c_tag).trim()));
    }
    if sentences.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(sentences)
}

pub fn load_conll(path: impl AsRef<Path>) -> Result<Vec<Sentence>, CorpusError> {
    parse_conll(&decode(read_bytes(path.as_ref())?))
}

/// Parses `word POS tag` lines with blank lines between sentences. A line
/// `# id = <n>` before a sentence sets its id; otherwise ids are ordinal.
pub fn parse_conll(text: &str) -> Result<Vec<Sentence>, CorpusError> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut pending_id: Option<usize> = None;
    let flush = |tokens: &mut Vec<Token>, id: &mut Option<usize>, out: &mut Vec<Sentence>| {
        if !tokens.is_empty() {
            let sid = id.take().unwrap_or(out.len());
            out.push(Sentence::new(sid, std::mem::take(tokens)));
        }
    };
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => flush(&mut tokens, &mut pending_id, &mut sentences),
            ["#", "id", "=", n] if tokens.is_empty() => {
                pending_id = Some(n.parse().map_err(|_| CorpusError::MalformedRow {
                    line: i as u64 + 1,
                    reason: format!("bad sentence id `{n}`"),
                })?);
            }
            [word, pos, tag] => tokens.push(Token::new(*word, *pos, *tag)),
            _ => {
                return Err(CorpusError::MalformedRow {
                    line: i as u64 + 1,
                    reason: format!("expected `word POS tag`, got {} fields", fields.len()),
                })
            }
        }
    }
    flush(&mut tokens, &mut pending_id, &mut sentences);
    if sentences.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(sentences)
}

/// Inverse of [`parse_conll`], including the id comment lines.
pub fn write_conll(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let _ = writeln!(out, "# id = {}", s.id);
        for t in &s.tokens {
            let _ = writeln!(out, "{} {} {}", t.word, t.pos, t.ner);
        }
        out.push('\n');
    }
    out
}
