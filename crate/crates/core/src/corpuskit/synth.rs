//! Synthetic documents made of `subject relation object .` facts, with lead
//! summaries and controlled corruptions of those summaries.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CorpusExample;
use crate::error::{Error, Result};
use crate::seqmodel::toy::mix;
use crate::seqmodel::Vocabulary;

pub const NEGATION: &str = "not";
pub const PERIOD: &str = ".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    /// An entity is replaced by one the document never mentions.
    EntitySwap,
    /// A number is replaced by one the document never mentions.
    NumberPerturb,
    /// `not` is inserted after a relation.
    NegationFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Entities are named `e00`, `e01`, ...
    pub num_entities: usize,
    /// Numbers are named `n00`, `n01`, ...
    pub num_numbers: usize,
    pub entity_relations: Vec<String>,
    pub number_relations: Vec<String>,
    /// Inclusive range of facts per document.
    pub doc_facts: (usize, usize),
    /// Inclusive range of leading facts copied into the summary.
    pub summary_facts: (usize, usize),
    /// Probability that a fact has a number as its object.
    pub number_fact_rate: f64,
    /// Fraction of examples whose summary is corrupted, in [0, 1].
    pub rate: f64,
    pub kinds: Vec<CorruptionKind>,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        CorruptionSpec {
            num_entities: 24,
            num_numbers: 16,
            entity_relations: words(&["likes", "sees", "hires", "calls", "meets", "joins"]),
            number_relations: words(&["has", "won", "scored"]),
            doc_facts: (3, 4),
            summary_facts: (1, 1),
            number_fact_rate: 0.3,
            rate: 0.3,
            kinds: vec![CorruptionKind::EntitySwap],
            seed: 0,
        }
    }
}

/// How one example was corrupted; `kind` is `None` for clean examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionLabel {
    pub id: String,
    pub kind: Option<CorruptionKind>,
    /// Index of the edited summary fact.
    pub fact: Option<usize>,
    pub original: Option<String>,
    pub replacement: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCorpus {
    pub clean: Vec<CorpusExample>,
    pub corrupted: Vec<CorpusExample>,
    pub labels: Vec<CorruptionLabel>,
    pub vocab: Vocabulary,
}

fn entity(i: usize) -> String {
    format!("e{i:02}")
}

fn number(i: usize) -> String {
    format!("n{i:02}")
}

#[derive(Debug, Clone)]
struct Fact {
    tokens: Vec<String>,
    numeric: bool,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.rate) || !(0.0..=1.0).contains(&self.number_fact_rate) {
            return bad("rates must lie in [0, 1]".into());
        }
        let (dmin, dmax) = self.doc_facts;
        let (smin, smax) = self.summary_facts;
        if dmin == 0 || dmin > dmax || smin == 0 || smin > smax || smax > dmin {
            return bad(format!("bad fact ranges: document {dmin}..={dmax}, summary {smin}..={smax}"));
        }
        if self.entity_relations.is_empty() || self.kinds.is_empty() {
            return bad("entity relations and corruption kinds must be non-empty".into());
        }
        // distinct subjects plus one unused entity for swaps
        if self.num_entities < 2 * dmax + 1 {
            return bad(format!(
                "{} entities cannot fill {dmax} facts and leave one to swap in",
                self.num_entities
            ));
        }
        if self.number_fact_rate > 0.0 && (self.number_relations.is_empty() || self.num_numbers < dmax + 1) {
            return bad(format!("{} numbers cannot support {dmax} numeric facts plus a perturbation", self.num_numbers));
        }
        let mut seen = HashSet::new();
        let reserved = [NEGATION, PERIOD];
        for r in self.entity_relations.iter().chain(&self.number_relations) {
            if r.is_empty() || r.contains(char::is_whitespace) || reserved.contains(&r.as_str()) || !seen.insert(r) {
                return bad(format!("bad or duplicate relation {r:?}"));
            }
            if r.len() == 3 && (r.starts_with('e') || r.starts_with('n')) && r[1..].bytes().all(|b| b.is_ascii_digit()) {
                return bad(format!("relation {r:?} collides with generated names"));
            }
        }
        Ok(())
    }

    /// Every token the generator can emit, specials first.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut words: Vec<String> = (0..self.num_entities).map(entity).collect();
        words.extend((0..self.num_numbers).map(number));
        words.extend(self.entity_relations.iter().cloned());
        words.extend(self.number_relations.iter().cloned());
        words.push(NEGATION.into());
        words.push(PERIOD.into());
        Vocabulary::with_specials(words)
    }

    pub fn vocab_size(&self) -> Result<usize> {
        Ok(self.vocabulary()?.len())
    }

    fn document(&self, rng: &mut ChaCha8Rng) -> Vec<Fact> {
        let n = rng.gen_range(self.doc_facts.0..=self.doc_facts.1);
        let mut ents: Vec<usize> = (0..self.num_entities).collect();
        ents.shuffle(rng);
        // subjects are distinct so every `subject relation` prefix is unique
        let subjects = &ents[..n];
        let objects = &ents[n..];
        let mut nums: Vec<usize> = (0..self.num_numbers).collect();
        nums.shuffle(rng);
        (0..n)
            .map(|i| {
                let numeric = rng.gen_bool(self.number_fact_rate);
                let (rel, obj) = if numeric {
                    (self.number_relations.choose(rng).unwrap(), number(nums[i]))
                } else {
                    (self.entity_relations.choose(rng).unwrap(), entity(objects[rng.gen_range(0..objects.len())]))
                };
                Fact {
                    tokens: vec![entity(subjects[i]), rel.clone(), obj],
                    numeric,
                }
            })
            .collect()
    }

    fn corrupt(&self, id: &str, doc: &[Fact], summary: &mut [Fact], rng: &mut ChaCha8Rng) -> CorruptionLabel {
        let used: HashSet<&str> = doc.iter().flat_map(|f| f.tokens.iter().map(String::as_str)).collect();
        let mut kind = *self.kinds.choose(rng).unwrap();
        let numeric: Vec<usize> = (0..summary.len()).filter(|&i| summary[i].numeric).collect();
        if kind == CorruptionKind::NumberPerturb && numeric.is_empty() {
            kind = CorruptionKind::EntitySwap;
        }
        let fact = match kind {
            CorruptionKind::NumberPerturb => *numeric.choose(rng).unwrap(),
            _ => rng.gen_range(0..summary.len()),
        };
        let f = &mut summary[fact];
        let (original, replacement) = match kind {
            CorruptionKind::EntitySwap => {
                // the object when it is an entity, else the subject
                let slot = if f.numeric { 0 } else { 2 };
                let fresh: Vec<String> = (0..self.num_entities).map(entity).filter(|e| !used.contains(e.as_str())).collect();
                let new = fresh.choose(rng).unwrap().clone();
                (std::mem::replace(&mut f.tokens[slot], new.clone()), new)
            }
            CorruptionKind::NumberPerturb => {
                let fresh: Vec<String> = (0..self.num_numbers).map(number).filter(|n| !used.contains(n.as_str())).collect();
                let new = fresh.choose(rng).unwrap().clone();
                (std::mem::replace(&mut f.tokens[2], new.clone()), new)
            }
            CorruptionKind::NegationFlip => {
                f.tokens.insert(2, NEGATION.into());
                (f.tokens[1].clone(), format!("{} {NEGATION}", f.tokens[1]))
            }
        };
        CorruptionLabel {
            id: id.into(),
            kind: Some(kind),
            fact: Some(fact),
            original: Some(original),
            replacement: Some(replacement),
        }
    }
}

fn render(facts: &[Fact]) -> String {
    facts
        .iter()
        .map(|f| format!("{} {PERIOD}", f.tokens.join(" ")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates `n` examples with lead summaries and, for `round(rate * n)`
/// of them, a corrupted summary. A pure function of `(spec, n)`.
pub fn generate_corpus(spec: &CorruptionSpec, n: usize) -> Result<GeneratedCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("corpus size must be at least 1".into()));
    }
    let vocab = spec.vocabulary()?;
    let mut doc_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0));
    let mut bad_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1));
    let mut which: Vec<usize> = (0..n).collect();
    which.shuffle(&mut bad_rng);
    let n_bad = (spec.rate * n as f64).round() as usize;
    let bad: HashSet<usize> = which[..n_bad].iter().copied().collect();

    let width = (n.max(2) - 1).to_string().len();
    let mut out = GeneratedCorpus {
        clean: Vec::with_capacity(n),
        corrupted: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        vocab,
    };
    for i in 0..n {
        let id = format!("syn{i:0width$}");
        let doc = spec.document(&mut doc_rng);
        let k = doc_rng.gen_range(spec.summary_facts.0..=spec.summary_facts.1);
        let mut summary = doc[..k].to_vec();
        let clean = CorpusExample {
            id: id.clone(),
            document: render(&doc),
            summary: render(&summary),
        };
        let label = if bad.contains(&i) {
            spec.corrupt(&id, &doc, &mut summary, &mut bad_rng)
        } else {
            CorruptionLabel {
                id: id.clone(),
                kind: None,
                fact: None,
                original: None,
                replacement: None,
            }
        };
        out.corrupted.push(CorpusExample {
            summary: render(&summary),
            ..clean.clone()
        });
        out.clean.push(clean);
        out.labels.push(label);
    }
    Ok(out)
}
