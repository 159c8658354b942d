//! In-memory document model shared by the DocRED reader, the synthetic
//! generator, and the model.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A token span `[start, end)` in the flattened document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    /// Surface string, used for train/dev overlap when scoring IgnF1.
    pub name: String,
    pub sent_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    /// Slot of this entity within its document; selects the marker pair.
    pub entity_id: usize,
    pub mentions: Vec<Mention>,
    pub entity_type: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
    /// Composition steps needed to derive the fact from stated facts
    /// (0 = stated). Only known for synthetic data.
    pub depth: Option<u32>,
    /// The same (head name, tail name, relation) triple occurs in training.
    pub seen_in_train: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    /// Start offset of each sentence in `tokens`.
    pub sentence_starts: Vec<usize>,
    pub entities: Vec<Entity>,
    pub facts: Vec<Fact>,
}

impl Document {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Checks span bounds, fact indices, and duplicate facts.
    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        for (i, e) in self.entities.iter().enumerate() {
            if e.mentions.is_empty() {
                return Err(Error::Document(format!("{}: entity {i} has no mentions", self.doc_id)));
            }
            for m in &e.mentions {
                if m.start >= m.end || m.end > len {
                    return Err(Error::Document(format!(
                        "{}: mention [{}, {}) of entity {i} outside [0, {len})",
                        self.doc_id, m.start, m.end
                    )));
                }
            }
        }
        let mut seen = HashSet::new();
        for f in &self.facts {
            let n = self.entities.len();
            if f.head >= n || f.tail >= n || f.head == f.tail {
                return Err(Error::Document(format!(
                    "{}: fact ({}, {}, {}) has invalid entity indices",
                    self.doc_id, f.head, f.tail, f.relation
                )));
            }
            if !seen.insert((f.head, f.tail, f.relation)) {
                return Err(Error::Document(format!(
                    "{}: duplicate fact ({}, {}, {})",
                    self.doc_id, f.head, f.tail, f.relation
                )));
            }
        }
        Ok(())
    }

    /// Gold relation ids per ordered pair, row-major over `(s, o)`.
    pub fn pair_labels(&self) -> PairLabels {
        let n = self.entities.len();
        let mut relations = vec![Vec::new(); n * n];
        for f in &self.facts {
            relations[f.head * n + f.tail].push(f.relation);
        }
        for r in &mut relations {
            r.sort_unstable();
        }
        PairLabels { n, relations }
    }
}

/// Gold relation sets for every ordered entity pair of one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLabels {
    pub n: usize,
    /// Row-major `(s, o)`; diagonal entries are always empty.
    pub relations: Vec<Vec<usize>>,
}

impl PairLabels {
    pub fn get(&self, s: usize, o: usize) -> &[usize] {
        &self.relations[s * self.n + o]
    }

    pub fn label01(&self, s: usize, o: usize) -> bool {
        !self.get(s, o).is_empty()
    }

    /// Flat indices `s·n + o` of every off-diagonal pair, row-major.
    pub fn off_diagonal(&self) -> Vec<usize> {
        (0..self.n * self.n).filter(|p| p / self.n != p % self.n).collect()
    }
}

/// Ordered relation names; a relation's id is its position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSet {
    names: Vec<String>,
}

impl RelationSet {
    pub fn new(names: Vec<String>) -> Self {
        RelationSet { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Adds `name` if absent and returns its id.
    pub fn intern(&mut self, name: &str) -> usize {
        match self.id(name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }
}
