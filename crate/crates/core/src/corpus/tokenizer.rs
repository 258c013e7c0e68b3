//! Word-level tokenizer with helper tokens.
//!
//! Text is lowercased and split on whitespace; punctuation characters become
//! tokens of their own. Bracketed helper tokens such as `[SEP]` are kept whole.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = "[SEP]";
pub const ANS: &str = "[ANS]";

/// Helper tokens in id order; their ids never change.
pub const SPECIAL_TOKENS: [&str; 6] = [PAD, UNK, BOS, EOS, SEP, ANS];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;
pub const ANS_ID: u32 = 5;

/// Splits text into lowercase word and punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(special) = SPECIAL_TOKENS.iter().find(|s| rest.starts_with(**s)) {
                flush(&mut word, &mut out);
                out.push(special.to_string());
                rest = &rest[special.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from every token in `texts`, sorted after the
    /// helper tokens.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(split_words).collect();
        words.sort();
        words.dedup();
        words.retain(|w| !SPECIAL_TOKENS.contains(&w.as_str()));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(&text)?;
        if raw.tokens.len() < SPECIAL_TOKENS.len()
            || raw.tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS
        {
            return Err(Error::Checkpoint(format!(
                "{}: helper tokens missing or out of order",
                path.display()
            )));
        }
        Ok(Self::from_tokens(raw.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splitting() {
        assert_eq!(
            split_words("Who wrote F. H. Burnett's book?"),
            vec!["who", "wrote", "f", ".", "h", ".", "burnett", "'", "s", "book", "?"]
        );
        assert_eq!(split_words("in [ANS]."), vec!["in", "[ANS]", "."]);
        assert_eq!(split_words("[foo"), vec!["[", "foo"]);
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn special_ids_are_fixed() {
        let tok = Tokenizer::train(["zeta alpha", "[SEP] beta"]);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(tok.id(s), Some(i as u32));
        }
        assert_eq!(tok.id("[ANS]"), Some(ANS_ID));
        assert_eq!(tok.vocab_size(), 9);
        assert_eq!(tok.encode("alpha gamma"), vec![tok.id("alpha").unwrap(), UNK_ID]);
    }

    #[test]
    fn save_load_keeps_ids() {
        let tok = Tokenizer::train(["the book was published in 1910"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        tok.save(&p).unwrap();
        let back = Tokenizer::load(&p).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.id("book"), tok.id("book"));
    }

    proptest! {
        #[test]
        fn round_trip_on_corpus_tokens(picks in proptest::collection::vec(0usize..12, 0..20)) {
            let corpus = "the secret garden author was born in manchester , 1910 ? [SEP] [ANS]";
            let tok = Tokenizer::train([corpus]);
            let words: Vec<&str> = corpus.split(' ').collect();
            let text = picks.iter().map(|&i| words[i % words.len()]).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(tok.decode(&tok.encode(&text)), text);
        }
    }
}
