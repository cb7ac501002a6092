//! Pretrained word and character embedding tables with an out-of-vocabulary
//! fallback: unknown words are represented by the mean of their character
//! vectors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Word,
    Char,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    kind: EmbeddingKind,
    dim: Option<usize>,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(kind: EmbeddingKind) -> Self {
        Self { kind, dim: None, vectors: BTreeMap::new() }
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    /// Undefined until the first entry is inserted.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Inserts or replaces an entry. Returns true when an entry was replaced.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<bool> {
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(Error::Shape(format!("vector of width {} in a table of width {d}", vector.len())))
            }
            None => self.dim = Some(vector.len()),
            _ => {}
        }
        Ok(self.vectors.insert(token.into(), vector).is_some())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Renders the table in the whitespace text format, sorted by token.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (token, v) in &self.vectors {
            out.push_str(token);
            for x in v {
                out.push(' ');
                out.push_str(&format!("{x}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Parsed table plus the tokens that appeared more than once (last wins).
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedEmbeddings {
    pub table: EmbeddingTable,
    pub duplicates: Vec<String>,
}

/// Parses `token v1 v2 … vd` lines. Blank lines are skipped.
pub fn parse_embeddings(text: &str, kind: EmbeddingKind) -> Result<ParsedEmbeddings> {
    let mut table = EmbeddingTable::new(kind);
    let mut duplicates = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<core::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        if values.is_empty() {
            return Err(Error::Data(format!("line {}: token without a vector", lineno + 1)));
        }
        if let Some(d) = table.dim {
            if d != values.len() {
                return Err(Error::Data(format!("line {}: expected {d} values, found {}", lineno + 1, values.len())));
            }
        }
        if table.insert(token, values)? {
            duplicates.push(token.to_string());
        }
    }
    Ok(ParsedEmbeddings { table, duplicates })
}

/// Word and character tables sharing one width.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    words: EmbeddingTable,
    chars: EmbeddingTable,
    dim: usize,
}

impl Lexicon {
    pub fn new(words: EmbeddingTable, chars: EmbeddingTable) -> Result<Self> {
        let dim = match (words.dim(), chars.dim()) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("word width {a} differs from char width {b}")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Data("both embedding tables are empty".to_string())),
        };
        Ok(Self { words, chars, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &EmbeddingTable {
        &self.words
    }

    pub fn chars(&self) -> &EmbeddingTable {
        &self.chars
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        lookup_with_dim(token, &self.words, &self.chars, self.dim)
    }
}

fn lookup_with_dim(token: &str, words: &EmbeddingTable, chars: &EmbeddingTable, dim: usize) -> Vec<f64> {
    if let Some(v) = words.get(token) {
        return v.to_vec();
    }
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    let mut buf = [0u8; 4];
    for c in token.chars() {
        n += 1;
        if let Some(v) = chars.get(c.encode_utf8(&mut buf)) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
    }
    if n > 0 {
        for a in &mut acc {
            *a /= n as f64;
        }
    }
    acc
}

/// Word vector if known, else the mean of character vectors (unknown
/// characters count as zero vectors). Errors only when neither table has a
/// defined width or the widths differ.
pub fn lookup(token: &str, words: &EmbeddingTable, chars: &EmbeddingTable) -> Result<Vec<f64>> {
    let lex_dim = match (words.dim(), chars.dim()) {
        (Some(a), Some(b)) if a != b => return Err(Error::Config(format!("word width {a} differs from char width {b}"))),
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Data("lookup on empty embedding tables".to_string())),
    };
    Ok(lookup_with_dim(token, words, chars, lex_dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tables() -> (EmbeddingTable, EmbeddingTable) {
        let words = parse_embeddings("cat 1 2 3 4\ndog 0 0 1 0\nthe 5 5 5 5\n", EmbeddingKind::Word).unwrap().table;
        let chars = parse_embeddings("a 1 0 0 0\nb 0 2 0 0\n", EmbeddingKind::Char).unwrap().table;
        (words, chars)
    }

    #[test]
    fn parses_three_entries() {
        let (w, _) = tables();
        assert_eq!(w.len(), 3);
        assert_eq!(w.dim(), Some(4));
    }

    #[test]
    fn ragged_line_is_a_format_error() {
        let err = parse_embeddings("a 1 2 3 4\nb 1 2 3\n", EmbeddingKind::Word).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.starts_with("line 2")), "{err:?}");
    }

    #[test]
    fn empty_file_then_lookup_fails() {
        let empty = parse_embeddings("", EmbeddingKind::Word).unwrap().table;
        assert_eq!(empty.dim(), None);
        let chars = EmbeddingTable::new(EmbeddingKind::Char);
        assert!(lookup("x", &empty, &chars).is_err());
    }

    #[test]
    fn duplicate_token_last_wins() {
        let parsed = parse_embeddings("a 1\na 2\n", EmbeddingKind::Word).unwrap();
        assert_eq!(parsed.table.get("a"), Some(&[2.0][..]));
        assert_eq!(parsed.duplicates, ["a"]);
    }

    #[test]
    fn known_word_returns_stored_vector() {
        let (w, c) = tables();
        assert_eq!(lookup("cat", &w, &c).unwrap(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unknown_word_averages_characters() {
        let (w, c) = tables();
        assert_eq!(lookup("ab", &w, &c).unwrap(), [0.5, 1.0, 0.0, 0.0]);
        // 'z' is unknown and contributes a zero vector to the mean.
        assert_eq!(lookup("az", &w, &c).unwrap(), [0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn entirely_unknown_characters_give_zero() {
        let (w, c) = tables();
        assert_eq!(lookup("xyz", &w, &c).unwrap(), [0.0; 4]);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let (w, _) = tables();
        let c = parse_embeddings("a 1 2\n", EmbeddingKind::Char).unwrap().table;
        assert!(Lexicon::new(w, c).is_err());
    }

    proptest! {
        #[test]
        fn lookup_is_total_and_finite(token in "\\PC{0,12}") {
            let (w, c) = tables();
            let lex = Lexicon::new(w, c).unwrap();
            let v = lex.lookup(&token);
            prop_assert_eq!(v.len(), 4);
            prop_assert!(v.iter().all(|x| x.is_finite()));
            prop_assert_eq!(v, lex.lookup(&token));
        }
    }
}
