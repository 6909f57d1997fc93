//! Tokenization and the token index.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{template_words, Dialogue};
use crate::ontology::Ontology;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

const PUNCTUATION: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Lowercase whitespace tokenization; punctuation marks become their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if PUNCTUATION.contains(&ch) {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.extend(ch.to_lowercase());
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Tokens of a slot name, with the domain separator treated as a space.
pub fn slot_tokens(slot: &str) -> Vec<String> {
    tokenize(&slot.replace('-', " "))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Special tokens first, then every other token in sorted order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let rest: BTreeSet<String> = tokens.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())).collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Covers the templates, the ontology and all given dialogues.
    pub fn build<'a>(ontology: &Ontology, dialogues: impl IntoIterator<Item = &'a Dialogue>) -> Self {
        let mut words: BTreeSet<String> = template_words().into_iter().flat_map(|w| tokenize(&w)).collect();
        for slot in &ontology.slots {
            words.extend(slot_tokens(slot));
            for v in &ontology.values[slot] {
                words.extend(tokenize(v));
            }
        }
        for d in ontology.domains.iter() {
            words.extend(tokenize(d));
        }
        for d in dialogues {
            for t in &d.turns {
                words.extend(tokenize(&t.system));
                words.extend(tokenize(&t.user));
            }
        }
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of `token`, or of [`UNK`] when unknown.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.index[UNK])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(serde::de::Error::custom(format!("duplicate token {t}")));
            }
        }
        for s in SPECIALS {
            if !index.contains_key(s) {
                return Err(serde::de::Error::custom(format!("missing special token {s}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("I recommend Rice House."),
            ["i", "recommend", "rice", "house", "."]
        );
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(slot_tokens("restaurant-book people"), ["restaurant", "book", "people"]);
    }

    #[test]
    fn indices_are_dense_with_unique_specials() {
        let v = Vocabulary::from_tokens(["b".to_string(), "a".into(), "[CLS]".into(), "a".into()]);
        assert_eq!(v.len(), 6);
        for s in SPECIALS {
            assert_eq!(v.tokens().iter().filter(|t| *t == s).count(), 1);
        }
        let ids: BTreeSet<usize> = v.tokens().iter().map(|t| v.id(t)).collect();
        assert_eq!(ids, (0..v.len()).collect());
        assert_eq!(v.id("zzz"), v.id(UNK));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::from_tokens(["x".to_string(), "y".into()]);
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&text).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x","x"]"#).is_err());
    }
}
