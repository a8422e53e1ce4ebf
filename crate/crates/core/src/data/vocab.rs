use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
/// Stand-in for words outside the vocabulary.
pub const UNK: u32 = 4;

/// Tokens occupying ids 0..=4.
pub const RESERVED: [&str; 5] = ["<PAD>", "<CLS>", "<SEP>", "<MASK>", "<UNK>"];

/// Word-level vocabulary; line number in the vocabulary file is the id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from ordinary words; reserved tokens are prepended.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Build from a full token list whose first entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().take(4).enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::validation("vocabulary", format!("id {i} must be {r}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::validation("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        let mut v = Self { tokens, ids };
        if !v.ids.contains_key(RESERVED[4]) {
            // <UNK> is appended when a foreign vocabulary lacks it.
            let id = v.tokens.len() as u32;
            v.tokens.push(RESERVED[4].to_string());
            v.ids.insert(RESERVED[4].to_string(), id);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn unk_id(&self) -> u32 {
        self.ids[RESERVED[4]]
    }

    /// Id of `word`, or the unknown-word id.
    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or_else(|| self.unk_id())
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that ordinary text may contain (everything but the reserved tokens).
    pub fn word_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.tokens.len() as u32).filter(move |&i| !RESERVED.contains(&self.tokens[i as usize].as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocabulary::from_words(["dog", "cat", "dog"]);
        assert_eq!(v.id("<PAD>"), Some(PAD));
        assert_eq!(v.id("<CLS>"), Some(CLS));
        assert_eq!(v.id("<SEP>"), Some(SEP));
        assert_eq!(v.id("<MASK>"), Some(MASK));
        assert_eq!(v.unk_id(), UNK);
        assert_eq!(v.id("dog"), Some(5));
        assert_eq!(v.len(), 7);
        assert_eq!(v.id_or_unk("zebra"), UNK);
        assert_eq!(v.word_ids().collect::<Vec<_>>(), vec![5, 6]);
    }

    #[test]
    fn rejects_missing_reserved_prefix() {
        assert!(Vocabulary::from_tokens(vec!["dog".into()]).is_err());
    }
}
