//! Word-level vocabulary shared by captions, class prompts and synonym tables.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const SOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const MASK_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;
/// Ids below this value are reserved markers.
pub const FIRST_WORD_ID: TokenId = 5;

const RESERVED: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<mask>", "<unk>"];

/// Lowercases and splits on whitespace, dropping punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '-' || *c == '_')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from every word in `texts`, in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, capacity: usize) -> Result<Self> {
        let unique: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(unique);
        if all.len() > capacity {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("corpus needs {} ids but the vocabulary holds {capacity}", all.len()),
            ));
        }
        Ok(Self::from_words(all))
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { words, index }
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_words(self.words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        words(text)
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words_list(&self) -> &[String] {
        &self.words
    }
}
