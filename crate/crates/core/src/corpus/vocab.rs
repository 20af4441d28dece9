//! Token ↔ id mapping with four reserved entries.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn decode(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK])
    }

    /// Encodes a sentence and appends the end-of-sentence id.
    pub fn encode_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.encode(t.as_ref())).collect();
        ids.push(EOS);
        ids
    }

    /// Decodes ids up to (not including) the first end-of-sentence, skipping
    /// padding and sentence-begin markers.
    pub fn decode_sentence(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.decode(i).to_string())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens[RESERVED.len()..] {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::format(
                    path.display().to_string(),
                    i + 1,
                    "expected one token per line",
                ));
            }
            tokens.push(t.to_string());
        }
        Self::from_tokens(tokens)
    }
}

/// Keeps the `max_size` most frequent tokens (ties broken lexicographically);
/// the reserved entries are always present on top of those.
pub fn build_vocab<I, S, T>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    if max_size <= RESERVED.len() {
        return Err(Error::contract(format!(
            "vocabulary size must exceed {} (got {max_size})",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in corpus {
        for tok in sentence {
            let tok = tok.as_ref();
            if RESERVED.contains(&tok) {
                continue;
            }
            *counts.entry(tok.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::contract(
            "cannot build a vocabulary from an empty corpus",
        ));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(s: &str) -> Vec<Vec<&str>> {
        s.lines().map(|l| l.split_whitespace().collect()).collect()
    }

    #[test]
    fn reserved_then_by_frequency() {
        let v = build_vocab(split("a a b"), 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(&v.tokens()[..4], &RESERVED.map(String::from));
        assert_eq!(v.encode("a"), 4);
        assert_eq!(v.encode("b"), 5);
        assert_eq!(v.decode(v.encode("a")), "a");
        assert_eq!(v.encode("zzz"), UNK);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(split("c b\na"), 10).unwrap();
        assert!(v.encode("b") < v.encode("c"));
        assert!(v.encode("a") < v.encode("b"));
    }

    #[test]
    fn cap_drops_rarest() {
        // t0 occurs 10 times, t1 9 times, ..., t9 once
        let mut corpus = Vec::new();
        for i in 0..10 {
            corpus.push(vec![format!("t{i}"); 10 - i]);
        }
        let v = build_vocab(corpus, 7).unwrap();
        let unknown: Vec<usize> = (0..10)
            .filter(|i| v.encode(&format!("t{i}")) == UNK)
            .collect();
        assert_eq!(unknown, vec![7, 8, 9]);
    }

    #[test]
    fn rejects_empty_and_tiny() {
        assert!(build_vocab(Vec::<Vec<&str>>::new(), 10).is_err());
        assert!(build_vocab(split("a"), 4).is_err());
    }

    #[test]
    fn sentence_round_trip() {
        let v = build_vocab(split("x y z"), 10).unwrap();
        let ids = v.encode_sentence(&["x", "q", "z"]);
        assert_eq!(ids.last(), Some(&EOS));
        assert_eq!(v.decode_sentence(&ids), vec!["x", "<unk>", "z"]);
    }

    #[test]
    fn save_load() {
        let v = build_vocab(split("x y y z"), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
