//! Word list for the logits-access (word-sequence) search.
//!
//! The builtin list is a fixed, versioned asset shipped with the crate:
//! ~10k distinct lowercase words of 3-4 characters, so a 20-word prefix
//! plus prompt always fits the default 128-character context.

use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const BUILTIN_V1: &str = include_str!("../../assets/words_v1.txt");

#[derive(Debug, Error)]
pub enum WordListError {
    #[error("word list needs at least 2 distinct words, got {0}")]
    TooSmall(usize),
    #[error("word list entry {0:?} is empty or contains whitespace")]
    BadWord(String),
    #[error("could not read word list: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct WordList {
    words: Vec<String>,
}

impl WordList {
    /// The versioned list shipped in `assets/words_v1.txt`.
    pub fn builtin() -> &'static WordList {
        static LIST: OnceLock<WordList> = OnceLock::new();
        LIST.get_or_init(|| {
            WordList::from_words(BUILTIN_V1.lines().map(str::to_string).collect())
                .expect("builtin word list")
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, WordListError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }

    pub fn from_words(words: Vec<String>) -> Result<Self, WordListError> {
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(WordListError::BadWord(w.clone()));
            }
        }
        let mut distinct = words.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(WordListError::TooSmall(distinct.len()));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> &str {
        &self.words[rng.gen_range(0..self.words.len())]
    }

    /// Uniform draw over the list excluding `current`.
    pub fn sample_excluding(&self, rng: &mut ChaCha8Rng, current: &str) -> &str {
        loop {
            let w = &self.words[rng.gen_range(0..self.words.len())];
            if w != current {
                return w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_list_is_large_and_distinct() {
        let list = WordList::builtin();
        assert!(list.len() >= 9000, "got {}", list.len());
        let mut sorted = list.words().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), list.len());
        assert!(list.words().iter().all(|w| w.len() <= 4));
    }

    #[test]
    fn exclusion_sampling_never_returns_current() {
        let list = WordList::from_words(vec!["aa".into(), "bb".into()]).unwrap();
        let mut rng = crate::rng::stream(1, "t", &[]);
        for _ in 0..20 {
            assert_eq!(list.sample_excluding(&mut rng, "aa"), "bb");
        }
    }

    #[test]
    fn tiny_lists_are_rejected() {
        assert!(WordList::from_words(vec!["aa".into(), "aa".into()]).is_err());
        assert!(WordList::from_words(vec!["a b".into(), "c".into()]).is_err());
    }
}
