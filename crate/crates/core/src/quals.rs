//! The QUALS consistency score: how much less likely the document makes the
//! summary's own q-a pairs, averaged over the pairs that survive filtering.
//!
//! A pair whose answer the document does not support drops sharply in
//! likelihood when re-scored on the document. For instance a summary that
//! invents a flight number yields a pair like "what flight crashed? / 4U 9525"
//! whose contribution is strongly negative, while a pair about an entity the
//! document does mention stays near zero.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::qagen::{filter_qa, generate_qa_candidates, ll_qa, QAPair};
use crate::qagsref::token_f1;
use crate::seqmodel::{greedy_continue, GenerationConfig, Seq2Seq, TokenSequence};

/// A selected pair with its score contribution `ll_doc - ll_summ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: QAPair,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualsResult {
    /// Absent exactly when no pair survived filtering.
    pub score: Option<f64>,
    pub m: usize,
    pub pairs: Vec<ScoredPair>,
    pub unscorable: bool,
    /// Generations that did not parse as `question <a> answer`.
    pub dropped: usize,
}

fn require_nonempty(vocab: &crate::seqmodel::Vocabulary, document: &TokenSequence, summary: &TokenSequence) -> Result<()> {
    document.validate(vocab)?;
    summary.validate(vocab)?;
    if document.trimmed(vocab).is_empty() || summary.trimmed(vocab).is_empty() {
        return Err(Error::InvalidInput("document and summary must be non-empty".into()));
    }
    Ok(())
}

/// Filtered q-a pairs for `summary`, plus the parse-failure count.
fn selected_pairs<M: Seq2Seq + ?Sized>(
    qagen: &M,
    summary: &TokenSequence,
    config: &GenerationConfig,
) -> Result<(Vec<QAPair>, usize)> {
    let vocab = qagen.vocab();
    let cands = generate_qa_candidates(qagen, summary, config)?;
    let text = vocab.decode(summary.trimmed(vocab));
    Ok((filter_qa(&cands.pairs, &text), cands.dropped))
}

/// Scores `summary` against `document`.
///
/// Both likelihoods of each selected pair are computed with the same
/// scoring call, so `document == summary` gives exactly zero.
pub fn quals_score<M: Seq2Seq + ?Sized>(
    qagen: &M,
    document: &TokenSequence,
    summary: &TokenSequence,
    config: &GenerationConfig,
) -> Result<QualsResult> {
    require_nonempty(qagen.vocab(), document, summary)?;
    let (selected, dropped) = selected_pairs(qagen, summary, config)?;
    let mut pairs = Vec::with_capacity(selected.len());
    for mut p in selected {
        p.ll_summ = ll_qa(qagen, summary, &p)?;
        let ll_doc = ll_qa(qagen, document, &p)?;
        p.ll_doc = Some(ll_doc);
        pairs.push(ScoredPair {
            contribution: ll_doc - p.ll_summ,
            pair: p,
        });
    }
    let m = pairs.len();
    let score = (m > 0).then(|| pairs.iter().map(|p| p.contribution).sum::<f64>() / m as f64);
    Ok(QualsResult {
        score,
        m,
        pairs,
        unscorable: m == 0,
        dropped,
    })
}

/// Scores every `(id, document, summary)` in parallel. Ids must be unique.
pub fn quals_batch<M: Seq2Seq + ?Sized>(
    qagen: &M,
    corpus: &[(String, TokenSequence, TokenSequence)],
    config: &GenerationConfig,
) -> Result<BTreeMap<String, QualsResult>> {
    let mut seen = HashSet::new();
    if let Some((id, _, _)) = corpus.iter().find(|(id, _, _)| !seen.insert(id.as_str())) {
        return Err(Error::InvalidInput(format!("duplicate id {id:?}")));
    }
    corpus
        .par_iter()
        .map(|(id, d, s)| Ok((id.clone(), quals_score(qagen, d, s, config)?)))
        .collect()
}

/// Answer-agreement variant: force each selected question on the document,
/// greedily decode an answer and compare it to the summary's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualsF1Result {
    pub score: Option<f64>,
    pub m: usize,
    /// `(summary answer, document answer, F1)` per selected pair.
    pub answers: Vec<(String, String, f64)>,
    pub unscorable: bool,
}

pub fn quals_f1<M: Seq2Seq + ?Sized>(
    qagen: &M,
    document: &TokenSequence,
    summary: &TokenSequence,
    config: &GenerationConfig,
) -> Result<QualsF1Result> {
    let vocab = qagen.vocab();
    require_nonempty(vocab, document, summary)?;
    let (selected, _) = selected_pairs(qagen, summary, config)?;
    let mut answers = Vec::with_capacity(selected.len());
    for p in &selected {
        let mut prefix = p.question.ids.clone();
        prefix.push(vocab.sep());
        let out = greedy_continue(qagen, document.trimmed(vocab), &prefix, config.max_len)?;
        let a = vocab.decode(&p.answer.ids);
        let a_doc = vocab.decode(&out.sequence.ids);
        let f1 = token_f1(&a, &a_doc);
        answers.push((a, a_doc, f1));
    }
    let m = answers.len();
    Ok(QualsF1Result {
        score: (m > 0).then(|| answers.iter().map(|x| x.2).sum::<f64>() / m as f64),
        m,
        answers,
        unscorable: m == 0,
    })
}

/// One line of a scored-corpus file. The score key (`quals`, `qags`, ...)
/// is chosen by the writer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub id: String,
    pub score: Option<f64>,
    pub unscorable: bool,
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub q: String,
    pub a: String,
    pub ll_summ: f64,
    pub ll_doc: Option<f64>,
}

impl ScoredRecord {
    pub fn from_quals(id: &str, r: &QualsResult, vocab: &crate::seqmodel::Vocabulary) -> Self {
        ScoredRecord {
            id: id.to_string(),
            score: r.score,
            unscorable: r.unscorable,
            pairs: r
                .pairs
                .iter()
                .map(|p| PairRecord {
                    q: vocab.decode(&p.pair.question.ids),
                    a: vocab.decode(&p.pair.answer.ids),
                    ll_summ: p.pair.ll_summ,
                    ll_doc: p.pair.ll_doc,
                })
                .collect(),
        }
    }

    pub fn to_json(&self, key: &str) -> Value {
        let mut m = Map::new();
        m.insert("id".into(), Value::from(self.id.clone()));
        m.insert(key.into(), self.score.map_or(Value::Null, Value::from));
        m.insert("unscorable".into(), Value::from(self.unscorable));
        m.insert("pairs".into(), serde_json::to_value(&self.pairs).expect("pairs serialize"));
        Value::Object(m)
    }

    /// Parses a line, taking the score from `key`.
    pub fn from_json(v: &Value, key: &str) -> std::result::Result<Self, String> {
        let obj = v.as_object().ok_or("line is not a JSON object")?;
        let id = obj.get("id").and_then(Value::as_str).ok_or("missing string key `id`")?;
        let score = match obj.get(key) {
            Some(Value::Null) => None,
            Some(x) => Some(x.as_f64().ok_or(format!("`{key}` is not a number"))?),
            None => return Err(format!("missing key `{key}`")),
        };
        let unscorable = obj.get("unscorable").and_then(Value::as_bool).unwrap_or(score.is_none());
        let pairs = match obj.get("pairs") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| e.to_string())?,
            None => Vec::new(),
        };
        Ok(ScoredRecord {
            id: id.to_string(),
            score,
            unscorable,
            pairs,
        })
    }
}

pub fn write_scored(path: &Path, key: &str, records: &[ScoredRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r.to_json(key))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Score keys recognised when a file's key is not given.
pub const SCORE_KEYS: [&str; 4] = ["quals", "qags", "quals_f1", "score"];

/// Reads a scored-corpus file. With `key = None` the first of
/// [`SCORE_KEYS`] present on the first line is used for the whole file.
pub fn read_scored(path: &Path, key: Option<&str>) -> Result<Vec<ScoredRecord>> {
    let text = fs::read_to_string(path)?;
    let mut key = key.map(str::to_string);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Format { line: i + 1, message };
        let v: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let k = match &key {
            Some(k) => k.clone(),
            None => {
                let found = SCORE_KEYS
                    .iter()
                    .find(|k| v.get(**k).is_some())
                    .ok_or_else(|| err("no score key found".into()))?;
                key = Some(found.to_string());
                found.to_string()
            }
        };
        let r = ScoredRecord::from_json(&v, &k).map_err(err)?;
        if !seen.insert(r.id.clone()) {
            return Err(err(format!("duplicate id {:?}", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}
