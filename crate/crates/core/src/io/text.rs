//! Query tokenization and vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Known words map to `0..words`; unknown words hash into
/// `words..words + oov_buckets`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    oov_buckets: usize,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, oov_buckets: usize) -> Result<Self> {
        if oov_buckets == 0 {
            return Err(Error::InvalidArgument("at least one out-of-vocabulary bucket is needed".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || tokenize(w) != [w.clone()] {
                return Err(Error::InvalidArgument(format!("{w:?} is not a normalized token")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self {
            words,
            index,
            oov_buckets,
        })
    }

    /// Vocabulary of the distinct tokens of `texts` in first-seen order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, oov_buckets: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::new();
        for t in texts {
            for tok in tokenize(t) {
                if seen.insert(tok.clone()) {
                    words.push(tok);
                }
            }
        }
        Self::new(words, oov_buckets)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn oov_buckets(&self) -> usize {
        self.oov_buckets
    }

    /// Rows needed in the embedding table.
    pub fn size(&self) -> usize {
        self.words.len() + self.oov_buckets
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => self.words.len() + (fnv1a(token) % self.oov_buckets as u64) as usize,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::Empty(format!("query {text:?} has no tokens")));
        }
        Ok(ids)
    }
}
