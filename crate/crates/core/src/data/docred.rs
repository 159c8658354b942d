//! DocRED-schema JSON reader and writer.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::document::{Document, Entity, Fact, Mention, RelationSet};
use crate::error::{Error, Result};

/// Documents with more entities than this are skipped.
pub const MAX_ENTITIES: usize = 42;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub name: String,
    pub sent_id: usize,
    pub pos: [usize; 2],
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub h: usize,
    pub t: usize,
    pub r: String,
    #[serde(default)]
    pub evidence: Vec<usize>,
    /// Composition depth; written only for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRedRecord {
    pub title: String,
    pub sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    pub vertex_set: Vec<Vec<MentionRecord>>,
    #[serde(default)]
    pub labels: Vec<LabelRecord>,
}

pub fn parse_docred(path: impl AsRef<Path>, relations: &mut RelationSet) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_docred_str(&text, relations)
}

/// Parses a JSON array of records, interning relation names into
/// `relations` in order of first appearance.
pub fn parse_docred_str(text: &str, relations: &mut RelationSet) -> Result<Vec<Document>> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Parse {
        index: 0,
        message: format!("expected a JSON array of records: {e}"),
    })?;
    let mut docs = Vec::with_capacity(values.len());
    for (index, v) in values.into_iter().enumerate() {
        let rec: DocRedRecord = serde_json::from_value(v).map_err(|e| Error::Parse {
            index,
            message: e.to_string(),
        })?;
        if rec.vertex_set.len() > MAX_ENTITIES {
            warn!(
                "record {index} ({}): {} entities exceeds the cap of {MAX_ENTITIES}, skipped",
                rec.title,
                rec.vertex_set.len()
            );
            continue;
        }
        docs.push(record_to_document(index, &rec, relations)?);
    }
    Ok(docs)
}

pub fn record_to_document(index: usize, rec: &DocRedRecord, relations: &mut RelationSet) -> Result<Document> {
    let mut tokens = Vec::new();
    let mut sentence_starts = Vec::with_capacity(rec.sents.len());
    for s in &rec.sents {
        sentence_starts.push(tokens.len());
        tokens.extend(s.iter().cloned());
    }
    let mut entities = Vec::with_capacity(rec.vertex_set.len());
    for (e, vertex) in rec.vertex_set.iter().enumerate() {
        let mut mentions = Vec::with_capacity(vertex.len());
        for m in vertex {
            let [start, end] = m.pos;
            let sent_len = rec.sents.get(m.sent_id).map(Vec::len);
            match sent_len {
                Some(len) if start < end && end <= len => mentions.push(Mention {
                    start: sentence_starts[m.sent_id] + start,
                    end: sentence_starts[m.sent_id] + end,
                    name: m.name.clone(),
                    sent_id: Some(m.sent_id),
                }),
                _ => warn!(
                    "record {index}: mention `{}` of entity {e} has span {:?} outside sentence {}, skipped",
                    m.name, m.pos, m.sent_id
                ),
            }
        }
        if mentions.is_empty() {
            return Err(Error::Parse {
                index,
                message: format!("entity {e} has no usable mentions"),
            });
        }
        entities.push(Entity {
            entity_id: e,
            entity_type: vertex.first().and_then(|m| m.entity_type.clone()),
            mentions,
        });
    }
    let mut seen = HashSet::new();
    let mut facts = Vec::with_capacity(rec.labels.len());
    for l in &rec.labels {
        if l.h >= entities.len() || l.t >= entities.len() {
            return Err(Error::Parse {
                index,
                message: format!("label ({}, {}, {}) indexes a missing entity", l.h, l.t, l.r),
            });
        }
        if l.h == l.t {
            warn!("record {index}: self-relation on entity {} dropped", l.h);
            continue;
        }
        let relation = relations.intern(&l.r);
        if seen.insert((l.h, l.t, relation)) {
            facts.push(Fact {
                head: l.h,
                tail: l.t,
                relation,
                depth: l.depth,
                seen_in_train: false,
            });
        }
    }
    let doc = Document {
        doc_id: rec.title.clone(),
        tokens,
        sentence_starts,
        entities,
        facts,
    };
    doc.validate()?;
    Ok(doc)
}

/// Inverse of [`record_to_document`] for documents with sentence bookkeeping.
pub fn document_to_record(doc: &Document, relations: &RelationSet) -> Result<DocRedRecord> {
    let mut bounds = doc.sentence_starts.clone();
    bounds.push(doc.tokens.len());
    let sents: Vec<Vec<String>> = bounds.windows(2).map(|w| doc.tokens[w[0]..w[1]].to_vec()).collect();
    let sentence_of = |pos: usize| bounds.windows(2).position(|w| w[0] <= pos && pos < w[1]);
    let mut vertex_set = Vec::with_capacity(doc.entities.len());
    for e in &doc.entities {
        let mut ms = Vec::with_capacity(e.mentions.len());
        for m in &e.mentions {
            let sid = m
                .sent_id
                .or_else(|| sentence_of(m.start))
                .ok_or_else(|| Error::Document(format!("{}: mention outside every sentence", doc.doc_id)))?;
            let base = bounds[sid];
            ms.push(MentionRecord {
                name: m.name.clone(),
                sent_id: sid,
                pos: [m.start - base, m.end - base],
                entity_type: e.entity_type.clone(),
            });
        }
        vertex_set.push(ms);
    }
    let labels = doc
        .facts
        .iter()
        .map(|f| {
            let r = relations
                .name(f.relation)
                .ok_or_else(|| Error::Document(format!("unknown relation id {}", f.relation)))?;
            Ok(LabelRecord {
                h: f.head,
                t: f.tail,
                r: r.to_string(),
                evidence: Vec::new(),
                depth: f.depth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DocRedRecord {
        title: doc.doc_id.clone(),
        sents,
        vertex_set,
        labels,
    })
}

pub fn write_docred(path: impl AsRef<Path>, docs: &[Document], relations: &RelationSet) -> Result<()> {
    let recs = docs
        .iter()
        .map(|d| document_to_record(d, relations))
        .collect::<Result<Vec<_>>>()?;
    let text = serde_json::to_string(&recs).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

/// Entity-name relation triples of a training split, for IgnF1.
#[derive(Clone, Debug, Default)]
pub struct TrainFacts {
    seen: HashSet<(String, String, usize)>,
}

impl TrainFacts {
    pub fn new(train: &[Document]) -> Self {
        let mut seen = HashSet::new();
        for d in train {
            for f in &d.facts {
                for h in &d.entities[f.head].mentions {
                    for t in &d.entities[f.tail].mentions {
                        seen.insert((h.name.clone(), t.name.clone(), f.relation));
                    }
                }
            }
        }
        TrainFacts { seen }
    }

    /// Any mention-name pairing of `(head, tail)` with `relation` occurs in
    /// training.
    pub fn contains(&self, doc: &Document, head: usize, tail: usize, relation: usize) -> bool {
        doc.entities[head].mentions.iter().any(|h| {
            doc.entities[tail]
                .mentions
                .iter()
                .any(|t| self.seen.contains(&(h.name.clone(), t.name.clone(), relation)))
        })
    }
}

/// Flags facts whose entity names and relation also occur in `train`.
pub fn mark_seen_in_train(docs: &mut [Document], train: &TrainFacts) {
    for d in docs.iter_mut() {
        let flags: Vec<bool> = d.facts.iter().map(|f| train.contains(d, f.head, f.tail, f.relation)).collect();
        for (f, s) in d.facts.iter_mut().zip(flags) {
            f.seen_in_train = s;
        }
    }
}
