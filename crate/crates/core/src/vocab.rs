//! Whitespace-token vocabulary with per-slot entity markers.
//!
//! On disk: one token per line, the line number is the id. Marker tokens
//! `<E{i}>` / `</E{i}>` are appended after the words, one pair per entity slot.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::document::Document;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const START: &str = "[CLS]";

pub fn start_marker(slot: usize) -> String {
    format!("<E{slot}>")
}

pub fn end_marker(slot: usize) -> String {
    format!("</E{slot}>")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        for special in [PAD, UNK, START] {
            if !index.contains_key(special) {
                return Err(Error::Vocab(format!("missing special token {special}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Specials, then corpus words by descending frequency (ties by token),
    /// then markers for every entity slot up to the corpus maximum.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut max_entities = 0;
        for d in docs {
            max_entities = max_entities.max(d.entities.len());
            for t in &d.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = [PAD, UNK, START].iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .map(|(w, _)| w.to_string())
                .filter(|w| w != PAD && w != UNK && w != START),
        );
        let mut v = Vocab::from_tokens(tokens).expect("built vocabulary is well formed");
        v.ensure_markers(max_entities);
        v
    }

    /// Appends marker pairs so that slots `0..n` are all covered.
    pub fn ensure_markers(&mut self, n: usize) {
        for slot in 0..n {
            for m in [start_marker(slot), end_marker(slot)] {
                if !self.index.contains_key(&m) {
                    self.index.insert(m.clone(), self.tokens.len());
                    self.tokens.push(m);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.index[UNK])
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Vocab::from_text(&text)
    }
}
