//! Word-level tokenizer with a fixed vocabulary built from the corpus.
//!
//! Text is split on whitespace and each word is mapped through the
//! vocabulary; words outside it map to the reserved unknown id. The
//! vocabulary is ordered by descending corpus frequency with ties broken
//! lexicographically, so building is deterministic.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Reserved id for out-of-vocabulary words.
pub const UNK_ID: u32 = 0;
const UNK_WORD: &str = "<unk>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    word_ids: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build a vocabulary from raw texts, capped at `max_vocab` entries
    /// (the unknown id occupies one slot).
    pub fn build<'a, I>(texts: I, max_vocab: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let max_vocab = max_vocab.max(1);
        let mut freq: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                *freq.entry(word.to_owned()).or_insert(0) += 1;
            }
        }
        let mut pairs: Vec<(String, u64)> = freq.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut words = Vec::with_capacity(max_vocab.min(pairs.len() + 1));
        words.push(UNK_WORD.to_owned());
        words.extend(pairs.into_iter().take(max_vocab - 1).map(|(w, _)| w));
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let word_ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, word_ids }
    }

    /// Rebuild the word -> id map after deserialization.
    pub fn reindex(&mut self) {
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.word_ids.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or(UNK_WORD)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let texts = ["b b a a c", "b"];
        let tok = Tokenizer::build(texts.iter().copied(), 100);
        // b occurs 3 times, a twice, c once.
        assert_eq!(tok.encode("b"), vec![1]);
        assert_eq!(tok.encode("a"), vec![2]);
        assert_eq!(tok.encode("c"), vec![3]);
        assert_eq!(tok.vocab_size(), 4);
    }

    #[test]
    fn unknown_maps_to_unk() {
        let tok = Tokenizer::build(["a b"], 100);
        assert_eq!(tok.encode("zzz a"), vec![UNK_ID, tok.encode("a")[0]]);
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let tok = Tokenizer::build(["a a a b b c"], 3);
        assert_eq!(tok.vocab_size(), 3);
        assert_eq!(tok.encode("a b c"), vec![1, 2, UNK_ID]);
    }

    #[test]
    fn deterministic_rebuild() {
        let texts = ["x y z y", "w x"];
        let a = Tokenizer::build(texts.iter().copied(), 10);
        let b = Tokenizer::build(texts.iter().copied(), 10);
        assert_eq!(a.encode("w x y z q"), b.encode("w x y z q"));
    }
}
