use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Color, Shape};

pub const PAD_TOKEN: &str = "<pad>";
pub const PAD_ID: u8 = 0;
/// Padded width of every encoded caption.
pub const MAX_TOKENS: usize = 24;

const FUNCTION_WORDS: [&str; 5] = [".", "a", "the", "is", "shape"];
const RELATION_WORDS: [&str; 21] = [
    "to", "left", "right", "of", "above", "below", "behind", "in", "front", "closer", "farther",
    "than", "from", "upper", "lower", "leftmost", "rightmost", "uppermost", "lowermost", "closest",
    "farthest",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabularyError {
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    UnknownId(u8),
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
}

/// Ordered word list with the padding token at id 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u8>,
}

/// A padded id sequence plus the number of real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u8>,
    pub len: usize,
}

impl Vocabulary {
    /// Every word the caption grammar can produce.
    pub fn standard() -> Self {
        let mut words: Vec<String> = vec![PAD_TOKEN.to_string()];
        words.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        words.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        words.extend(RELATION_WORDS.iter().map(|w| w.to_string()));
        Vocabulary::from_words(words).expect("standard vocabulary is valid")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self, VocabularyError> {
        if words.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(VocabularyError::Invalid("padding token must come first".into()));
        }
        if words.len() > 256 {
            return Err(VocabularyError::Invalid("more than 256 words".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u8).is_some() {
                return Err(VocabularyError::Invalid(format!("duplicate word '{w}'")));
            }
        }
        Ok(Vocabulary { words, index })
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

    pub fn id(&self, word: &str) -> Option<u8> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Encodes into exactly `max_len` ids, truncating long input.
    pub fn encode<S: AsRef<str>>(
        &self,
        tokens: &[S],
        max_len: usize,
    ) -> Result<Encoded, VocabularyError> {
        let mut ids = Vec::with_capacity(max_len);
        for t in tokens {
            let t = t.as_ref();
            ids.push(
                self.id(t)
                    .ok_or_else(|| VocabularyError::UnknownToken(t.to_string()))?,
            );
        }
        ids.truncate(max_len);
        let len = ids.len();
        ids.resize(max_len, PAD_ID);
        Ok(Encoded { ids, len })
    }

    /// Decodes ids, stopping at the first padding id.
    pub fn decode(&self, ids: &[u8]) -> Result<Vec<String>, VocabularyError> {
        ids.iter()
            .take_while(|&&i| i != PAD_ID)
            .map(|&i| {
                self.words
                    .get(i as usize)
                    .cloned()
                    .ok_or(VocabularyError::UnknownId(i))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.words).expect("word list serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, VocabularyError> {
        let words: Vec<String> =
            serde_json::from_str(s).map_err(|e| VocabularyError::Invalid(e.to_string()))?;
        Vocabulary::from_words(words)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VocabularyError;

    fn try_from(words: Vec<String>) -> Result<Self, Self::Error> {
        Vocabulary::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}
