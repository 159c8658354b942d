//! Synthetic documents whose gold facts include relations that are only
//! derivable by composing stated facts.
//!
//! Each document states base facts one per sentence through templates.
//! Composition rules `(a, b) → c` read "h a m" and "m b t" as implying
//! "h c t"; the closure of the stated facts under the rules is the gold set,
//! and every fact carries the number of rule applications needed to derive
//! it (0 for stated facts).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::document::{Document, Entity, Fact, Mention, RelationSet};
use crate::error::{Error, Result};
use crate::tensor::init::{self, Rng64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub name: String,
    pub head_type: String,
    pub tail_type: String,
    /// Sentence patterns with `{h}` and `{t}` placeholders, space separated.
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_docs: usize,
    pub entities_min: usize,
    pub entities_max: usize,
    pub relations: Vec<RelationTemplate>,
    /// `[first, second, result]` relation names.
    pub rules: Vec<[String; 3]>,
    /// Largest composition depth a gold fact may have.
    pub max_depth: u32,
    /// Target share of gold facts with depth ≥ 1.
    pub composed_fraction: f64,
    /// Relation-free co-occurrence sentences per entity.
    pub distractor_rate: f64,
    pub title_prefix: String,
    pub seed: u64,
}

fn template(name: &str, h: &str, t: &str, pats: &[&str]) -> RelationTemplate {
    RelationTemplate {
        name: name.into(),
        head_type: h.into(),
        tail_type: t.into(),
        templates: pats.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_docs: 500,
            entities_min: 6,
            entities_max: 10,
            relations: vec![
                template(
                    "childOf",
                    "PER",
                    "PER",
                    &["{h} is the child of {t} .", "{t} is the parent of {h} ."],
                ),
                template(
                    "citizenOf",
                    "PER",
                    "LOC",
                    &["{h} is a citizen of {t} .", "{t} granted citizenship to {h} ."],
                ),
                template("livesIn", "PER", "LOC", &["{h} lives in {t} .", "{t} is home to {h} ."]),
                template("partOf", "LOC", "LOC", &["{h} is located in {t} .", "{t} contains {h} ."]),
            ],
            rules: vec![
                ["childOf".into(), "citizenOf".into(), "citizenOf".into()],
                ["livesIn".into(), "partOf".into(), "livesIn".into()],
                ["partOf".into(), "partOf".into(), "partOf".into()],
            ],
            max_depth: 2,
            composed_fraction: 0.35,
            distractor_rate: 0.3,
            title_prefix: "synth".into(),
            seed: 17,
        }
    }
}

/// A `(head, relation, tail)` triple over document-local entity indices.
pub type Triple = (usize, usize, usize);

/// Gold facts and their composition depth, derived from `stated` under
/// `rules` (`(first, second, result)` relation ids).
pub fn closure(stated: &[Triple], rules: &[(usize, usize, usize)]) -> BTreeMap<Triple, u32> {
    let mut depth: BTreeMap<Triple, u32> = stated.iter().map(|&t| (t, 0)).collect();
    loop {
        let facts: Vec<(Triple, u32)> = depth.iter().map(|(&k, &v)| (k, v)).collect();
        let mut changed = false;
        for &((h, ra, m), da) in &facts {
            for &((m2, rb, t), db) in &facts {
                if m2 != m || t == h {
                    continue;
                }
                for &(a, b, c) in rules {
                    if a != ra || b != rb {
                        continue;
                    }
                    let d = 1 + da + db;
                    let slot = depth.entry((h, c, t)).or_insert(u32::MAX);
                    if d < *slot {
                        *slot = d;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return depth;
        }
    }
}

struct Resolved {
    relations: RelationSet,
    types: Vec<(String, String)>,
    templates: Vec<Vec<Vec<String>>>,
    rules: Vec<(usize, usize, usize)>,
    /// Relation sequences whose right fold composes, indexed by depth.
    chains: Vec<Vec<Vec<usize>>>,
}

impl SynthSpec {
    fn resolve(&self) -> Result<Resolved> {
        if self.relations.is_empty() {
            return Err(Error::Synth("no relations".into()));
        }
        if self.entities_min < 2 || self.entities_min > self.entities_max {
            return Err(Error::Synth(format!(
                "entity range {}..={} must satisfy 2 <= min <= max",
                self.entities_min, self.entities_max
            )));
        }
        if !(0.0..1.0).contains(&self.composed_fraction) {
            return Err(Error::Synth("composed_fraction must lie in [0, 1)".into()));
        }
        let relations = RelationSet::new(self.relations.iter().map(|r| r.name.clone()).collect());
        let id = |n: &str| {
            relations
                .id(n)
                .ok_or_else(|| Error::Synth(format!("rule mentions unknown relation `{n}`")))
        };
        let rules = self
            .rules
            .iter()
            .map(|[a, b, c]| Ok((id(a)?, id(b)?, id(c)?)))
            .collect::<Result<Vec<_>>>()?;
        let types: Vec<(String, String)> = self
            .relations
            .iter()
            .map(|r| (r.head_type.clone(), r.tail_type.clone()))
            .collect();
        let mut templates = Vec::with_capacity(self.relations.len());
        for r in &self.relations {
            let parsed: Vec<Vec<String>> = r
                .templates
                .iter()
                .map(|t| t.split_whitespace().map(str::to_string).collect())
                .collect();
            let ok = !parsed.is_empty()
                && parsed.iter().all(|t| {
                    t.iter().filter(|w| *w == "{h}").count() == 1 && t.iter().filter(|w| *w == "{t}").count() == 1
                });
            if !ok {
                return Err(Error::Synth(format!(
                    "relation `{}` needs templates with exactly one {{h}} and one {{t}}",
                    r.name
                )));
            }
            templates.push(parsed);
        }
        let fold = |seq: &[usize]| -> Option<usize> {
            let mut acc = *seq.last()?;
            for &r in seq[..seq.len() - 1].iter().rev() {
                acc = rules.iter().find(|&&(a, b, _)| a == r && b == acc)?.2;
            }
            Some(acc)
        };
        let mut chains = vec![Vec::new()];
        for depth in 1..=self.max_depth as usize {
            let mut seqs: Vec<Vec<usize>> = vec![vec![]];
            let types = &types;
            for _ in 0..=depth {
                seqs = seqs
                    .into_iter()
                    .flat_map(|s| {
                        (0..relations.len()).filter_map(move |r| {
                            let fits = s.last().map_or(true, |&p: &usize| types[p].1 == types[r].0);
                            fits.then(|| {
                                let mut n = s.clone();
                                n.push(r);
                                n
                            })
                        })
                    })
                    .collect();
            }
            seqs.retain(|s| fold(s).is_some());
            if seqs.is_empty() {
                return Err(Error::Synth(format!(
                    "no relation chain composes to depth {depth} under the given rules"
                )));
            }
            if depth + 2 > self.entities_max {
                return Err(Error::Synth(format!(
                    "depth {depth} needs {} entities but documents have at most {}",
                    depth + 2,
                    self.entities_max
                )));
            }
            chains.push(seqs);
        }
        if self.composed_fraction > 0.0 && self.max_depth == 0 {
            return Err(Error::Synth("composed_fraction > 0 requires max_depth >= 1".into()));
        }
        Ok(Resolved {
            relations,
            types,
            templates,
            rules,
            chains,
        })
    }
}

const PERSON_SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "te", "su", "no", "vi", "da", "re", "ko", "ma", "li", "to", "ne", "sa", "ji", "bo",
];
const PLACE_SYLLABLES: &[&str] = &["bar", "dun", "gal", "hev", "kor", "mar", "nor", "tal", "vel", "zan", "ost", "ril"];
const PLACE_SUFFIXES: &[&str] = &["ia", "land", "burg", "ton", "stan", "mere"];

fn entity_name(rng: &mut Rng64, ty: &str) -> String {
    let mut s = String::new();
    if ty == "LOC" {
        for _ in 0..rng.gen_range(1..=2) {
            s.push_str(PLACE_SYLLABLES.choose(rng).expect("non-empty"));
        }
        s.push_str(PLACE_SUFFIXES.choose(rng).expect("non-empty"));
    } else {
        for _ in 0..rng.gen_range(2..=3) {
            s.push_str(PERSON_SYLLABLES.choose(rng).expect("non-empty"));
        }
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => s,
    }
}

struct Builder<'a> {
    res: &'a Resolved,
    names: Vec<String>,
    types: Vec<String>,
    stated: Vec<Triple>,
}

impl<'a> Builder<'a> {
    fn add_entity(&mut self, rng: &mut Rng64, ty: &str) -> usize {
        let name = loop {
            let n = entity_name(rng, ty);
            if !self.names.contains(&n) {
                break n;
            }
        };
        self.names.push(name);
        self.types.push(ty.to_string());
        self.names.len() - 1
    }

    /// Deepest gold fact and number of composed facts once `extra` is stated.
    fn closure_with(&self, extra: Triple) -> (u32, usize) {
        let mut s = self.stated.clone();
        s.push(extra);
        let gold = closure(&s, &self.res.rules);
        (gold.values().copied().max().unwrap_or(0), gold.values().filter(|&&d| d > 0).count())
    }
}

/// Generates the dataset and the relation inventory in spec order.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Vec<Document>, RelationSet)> {
    let res = spec.resolve()?;
    let mut rng = init::rng(spec.seed);
    let mut total = 0usize;
    let mut composed = 0usize;
    let mut docs = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let budget = rng.gen_range(spec.entities_min..=spec.entities_max);
        let mut b = Builder {
            res: &res,
            names: Vec::new(),
            types: Vec::new(),
            stated: Vec::new(),
        };
        let mut isolated = Vec::new();
        loop {
            let remaining = budget - b.names.len();
            if remaining == 0 {
                break;
            }
            let gold = closure(&b.stated, &res.rules);
            let doc_composed = gold.values().filter(|&&d| d > 0).count();
            let frac_num = composed + doc_composed;
            let frac_den = total + gold.len();
            let want_composed =
                spec.composed_fraction > 0.0 && (frac_num as f64) < spec.composed_fraction * frac_den.max(1) as f64;
            let depths: Vec<usize> = (1..res.chains.len()).filter(|d| d + 2 <= remaining).collect();
            if want_composed && !depths.is_empty() {
                let d = *depths.choose(&mut rng).expect("non-empty");
                let seq = res.chains[d].choose(&mut rng).expect("non-empty").clone();
                let mut ents = vec![b.add_entity(&mut rng, &res.types[seq[0]].0)];
                for &r in &seq {
                    ents.push(b.add_entity(&mut rng, &res.types[r].1));
                }
                for (k, &r) in seq.iter().enumerate() {
                    b.stated.push((ents[k], r, ents[k + 1]));
                }
                continue;
            }
            let cap = if want_composed { usize::MAX } else { doc_composed };
            if !add_standalone(&mut b, &mut rng, remaining, spec.max_depth, cap) {
                let ty = res.types[rng.gen_range(0..res.types.len())].0.clone();
                isolated.push(b.add_entity(&mut rng, &ty));
            }
        }
        let gold = closure(&b.stated, &res.rules);
        total += gold.len();
        composed += gold.values().filter(|&&d| d > 0).count();
        docs.push(render(spec, &res, &mut rng, &b, &isolated, gold, format!("{}{i:05}", spec.title_prefix))?);
    }
    Ok((docs, res.relations))
}

/// Adds one stated fact that introduces at least one new entity without
/// exceeding the depth cap. Returns `false` if nothing fits.
/// States one more fact unless doing so would exceed `max_depth` or push the
/// document's composed-fact count above `max_composed`.
fn add_standalone(b: &mut Builder, rng: &mut Rng64, remaining: usize, max_depth: u32, max_composed: usize) -> bool {
    let res = b.res;
    for _ in 0..20 {
        let r = rng.gen_range(0..res.types.len());
        let (ht, tt) = res.types[r].clone();
        let existing = |ty: &str, b: &Builder| -> Vec<usize> { (0..b.names.len()).filter(|&e| b.types[e] == ty).collect() };
        let reuse_head = rng.gen_bool(0.5);
        let (h_old, t_old) = (existing(&ht, b), existing(&tt, b));
        // (reuse head?, reuse tail?) with at least one side new.
        let plan = if reuse_head && !h_old.is_empty() {
            (Some(*h_old.choose(rng).expect("non-empty")), None)
        } else if !t_old.is_empty() && rng.gen_bool(0.5) {
            (None, Some(*t_old.choose(rng).expect("non-empty")))
        } else {
            (None, None)
        };
        let needed = usize::from(plan.0.is_none()) + usize::from(plan.1.is_none());
        if needed > remaining {
            continue;
        }
        // Depth check with placeholder ids for new entities.
        let n = b.names.len();
        let h = plan.0.unwrap_or(n);
        let t = plan.1.unwrap_or(if plan.0.is_none() { n + 1 } else { n });
        let (depth, composed) = b.closure_with((h, r, t));
        if depth > max_depth || composed > max_composed {
            continue;
        }
        let h = match plan.0 {
            Some(e) => e,
            None => b.add_entity(rng, &ht),
        };
        let t = match plan.1 {
            Some(e) => e,
            None => b.add_entity(rng, &tt),
        };
        b.stated.push((h, r, t));
        return true;
    }
    false
}

fn render(
    spec: &SynthSpec,
    res: &Resolved,
    rng: &mut Rng64,
    b: &Builder,
    isolated: &[usize],
    gold: BTreeMap<Triple, u32>,
    title: String,
) -> Result<Document> {
    let n = b.names.len();
    // Sentences as (words, entity slots) where slots name which words are
    // entity placeholders.
    let mut sentences: Vec<Vec<(String, Option<usize>)>> = Vec::new();
    for &(h, r, t) in &b.stated {
        let pat = res.templates[r].choose(rng).expect("validated non-empty");
        sentences.push(
            pat.iter()
                .map(|w| match w.as_str() {
                    "{h}" => (String::new(), Some(h)),
                    "{t}" => (String::new(), Some(t)),
                    _ => (w.clone(), None),
                })
                .collect(),
        );
    }
    let mut extra: Vec<usize> = isolated.to_vec();
    let n_distract = (spec.distractor_rate * n as f64).round() as usize;
    extra.extend((0..n_distract).map(|_| rng.gen_range(0..n)));
    for a in extra {
        if n < 2 {
            break;
        }
        let mut c = rng.gen_range(0..n - 1);
        if c >= a {
            c += 1;
        }
        sentences.push(vec![
            (String::new(), Some(a)),
            ("was".into(), None),
            ("mentioned".into(), None),
            ("alongside".into(), None),
            (String::new(), Some(c)),
            (".".into(), None),
        ]);
    }
    sentences.shuffle(rng);

    // Random slot order so that chain position does not leak through
    // marker identity.
    let mut slot_of: Vec<usize> = (0..n).collect();
    slot_of.shuffle(rng);
    let mut entities: Vec<Entity> = (0..n)
        .map(|s| Entity {
            entity_id: s,
            mentions: Vec::new(),
            entity_type: None,
        })
        .collect();
    for e in 0..n {
        entities[slot_of[e]].entity_type = Some(b.types[e].clone());
    }
    let mut tokens = Vec::new();
    let mut sentence_starts = Vec::with_capacity(sentences.len());
    for (sid, s) in sentences.iter().enumerate() {
        sentence_starts.push(tokens.len());
        for (w, ent) in s {
            match ent {
                Some(e) => {
                    entities[slot_of[*e]].mentions.push(Mention {
                        start: tokens.len(),
                        end: tokens.len() + 1,
                        name: b.names[*e].clone(),
                        sent_id: Some(sid),
                    });
                    tokens.push(b.names[*e].clone());
                }
                None => tokens.push(w.clone()),
            }
        }
    }
    let mut facts: Vec<Fact> = gold
        .into_iter()
        .map(|((h, r, t), d)| Fact {
            head: slot_of[h],
            tail: slot_of[t],
            relation: r,
            depth: Some(d),
            seen_in_train: false,
        })
        .collect();
    facts.sort_by_key(|f| (f.head, f.tail, f.relation));
    let doc = Document {
        doc_id: title,
        tokens,
        sentence_starts,
        entities,
        facts,
    };
    doc.validate()?;
    Ok(doc)
}
