use super::ModelError;

/// Ordered list of single-character tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

/// The default 64-character vocabulary: space, newline, lowercase letters,
/// digits, and common punctuation.
const DEFAULT64: &str = " \nabcdefghijklmnopqrstuvwxyz0123456789.,:;!?'\"()[]{}-_+*/\\|@#$%&";

impl Vocab {
    pub fn default64() -> Self {
        let v = Self::from_chars(DEFAULT64.chars().collect()).expect("builtin vocab");
        debug_assert_eq!(v.size(), 64);
        v
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Self, ModelError> {
        if chars.is_empty() {
            return Err(ModelError::BadConfig("empty vocabulary".into()));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(ModelError::BadConfig(format!(
                    "duplicate vocabulary character {c:?}"
                )));
            }
        }
        Ok(Self { chars })
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn token(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&v| v == c)
    }

    pub fn char_at(&self, token: usize) -> Option<char> {
        self.chars.get(token).copied()
    }

    /// Encode a string, reporting the first out-of-vocabulary character.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, char> {
        text.chars().map(|c| self.token(c).ok_or(c)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.char_at(t))
            .collect()
    }
}
