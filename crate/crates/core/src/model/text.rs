//! Closed-vocabulary tokenizer for template captions.
//!
//! Words are maximal alphabetic runs, numerals are digit runs with an optional
//! single decimal part (`3.6`), and `,`/`.` are tokens of their own. So
//! `"Start at 3.6s,"` lexes as `Start`, `at`, `3.6`, `s`, `,`.

use std::collections::HashMap;

use super::{ModelError, Result};

/// Token id reserved for padding; never produced by [`Vocabulary::encode`].
pub const PAD: usize = 0;
const PAD_WORD: &str = "<pad>";

const TEMPLATE_WORDS: [&str; 11] = [
    "Start", "at", "and", "End", "it", "has", "Low", "Normal", "High", "Pitch", "Energy",
];

/// Splits a caption into `(byte offset, token)` pairs.
pub fn lex(caption: &str) -> Vec<(usize, &str)> {
    let bytes = caption.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < caption.len() {
        let c = caption[i..].chars().next().expect("in bounds");
        let start = i;
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
        } else if c.is_alphabetic() {
            for ch in caption[i..].chars() {
                if !ch.is_alphabetic() {
                    break;
                }
                i += ch.len_utf8();
            }
        } else {
            i += c.len_utf8();
        }
        out.push((start, &caption[start..i]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Template words, numerals `0.0`–`10.0`, punctuation and every token of
    /// the given class labels.
    pub fn for_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut words: Vec<String> = vec![PAD_WORD.into()];
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        words.extend(["s", ",", "."].iter().map(|w| w.to_string()));
        words.extend((0..=100).map(|d| format!("{}.{}", d / 10, d % 10)));
        for label in labels {
            words.extend(lex(label.as_ref()).into_iter().map(|(_, t)| t.to_string()));
        }
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(w.clone()));
        Self::from_words(words).expect("constructed vocabulary is valid")
    }

    /// Rebuilds a vocabulary from its word list (as stored in checkpoints).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD_WORD) {
            return Err(ModelError::Config(
                "vocabulary must start with the padding token".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(ModelError::Config(format!(
                    "invalid vocabulary entry {w:?}"
                )));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(ModelError::Config(format!(
                    "duplicate vocabulary entry {w:?}"
                )));
            }
        }
        Ok(Self { words, index })
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, caption: &str) -> Result<Vec<usize>> {
        let tokens = lex(caption);
        if tokens.is_empty() {
            return Err(ModelError::EmptyCaption);
        }
        tokens
            .into_iter()
            .map(|(offset, tok)| {
                self.id(tok)
                    .filter(|&i| i != PAD)
                    .ok_or_else(|| ModelError::UnknownToken {
                        token: tok.to_string(),
                        offset,
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_template_clause() {
        let toks: Vec<&str> = lex("Dog bark, Start at 3.6s and End at 10.0s, it has Normal Pitch.")
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        assert_eq!(
            toks,
            [
                "Dog", "bark", ",", "Start", "at", "3.6", "s", "and", "End", "at", "10.0", "s",
                ",", "it", "has", "Normal", "Pitch", "."
            ]
        );
    }

    #[test]
    fn unknown_token_is_named() {
        let v = Vocabulary::for_labels(&["Hum"]);
        match v.encode("Hum, Start at 1.0s zap") {
            Err(ModelError::UnknownToken { token, offset }) => {
                assert_eq!(token, "zap");
                assert_eq!(offset, 19);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(v.encode("  "), Err(ModelError::EmptyCaption)));
        assert!(v.encode("<pad>").is_err());
    }

    #[test]
    fn vocabulary_round_trips_through_words() {
        let v = Vocabulary::for_labels(&["Dog bark", "Hum", "Dog"]);
        assert_eq!(v.words().iter().filter(|w| *w == "Dog").count(), 1);
        assert_eq!(Vocabulary::from_words(v.words().to_vec()).unwrap(), v);
        assert!(v.id("9.9").is_some() && v.id("10.0").is_some() && v.id("10.1").is_none());
    }
}
