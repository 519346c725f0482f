//! Joint question-answer generation: `question <a> answer` sequences from a
//! conditioning text, their average log-likelihood under a context, and the
//! answer-containment / deduplication filter.

mod context;

pub use context::ContextQaGen;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{generate, DecodeMode, GenerationConfig, Seq2Seq, TokenId, TokenSequence, Vocabulary};

/// One generated question-answer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: TokenSequence,
    pub answer: TokenSequence,
    /// Average log-likelihood of the pair given the summary.
    pub ll_summ: f64,
    /// Average log-likelihood of the pair given the document, once scored.
    pub ll_doc: Option<f64>,
    pub normalized_answer: String,
}

impl QAPair {
    pub fn new(question: TokenSequence, answer: TokenSequence, ll_summ: f64, vocab: &Vocabulary) -> Self {
        let normalized_answer = normalize_text(&vocab.decode(&answer.ids));
        QAPair {
            question,
            answer,
            ll_summ,
            ll_doc: None,
            normalized_answer,
        }
    }

    /// `question <a> answer` as one id sequence.
    pub fn joined(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut ids = self.question.ids.clone();
        ids.push(vocab.sep());
        ids.extend_from_slice(&self.answer.ids);
        ids
    }
}

/// Lowercases, collapses whitespace and strips punctuation from both ends
/// of every whitespace token. Tokens that become empty are dropped.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a generated sequence at its first separator. Trailing
/// end-of-sequence and padding are ignored.
pub fn parse_qa(sequence: &TokenSequence, vocab: &Vocabulary) -> Result<(TokenSequence, TokenSequence)> {
    let mut body = sequence.trimmed(vocab);
    if body.last() == Some(&vocab.eos()) {
        body = &body[..body.len() - 1];
    }
    let Some(s) = body.iter().position(|&t| t == vocab.sep()) else {
        return Err(Error::MalformedPair("no answer separator".into()));
    };
    let (q, a) = (&body[..s], &body[s + 1..]);
    if q.is_empty() || a.is_empty() {
        return Err(Error::MalformedPair(format!(
            "empty {} side",
            if q.is_empty() { "question" } else { "answer" }
        )));
    }
    if body.contains(&vocab.eos()) {
        return Err(Error::MalformedPair("end-of-sequence inside pair".into()));
    }
    Ok((TokenSequence::new(q.to_vec()), TokenSequence::new(a.to_vec())))
}

/// Mean of the question- and answer-token log-probs; the separator's own
/// log-prob (index `n_q`) is left out of both sum and count.
fn pair_average(lps: &[f64], n_q: usize, n_a: usize) -> f64 {
    let total: f64 = lps[..n_q].iter().chain(&lps[n_q + 1..n_q + 1 + n_a]).sum();
    total / (n_q + n_a) as f64
}

/// Average log-likelihood of `question <a> answer` given `conditioning`.
pub fn ll_qa<M: Seq2Seq + ?Sized>(model: &M, conditioning: &TokenSequence, pair: &QAPair) -> Result<f64> {
    let vocab = model.vocab();
    conditioning.validate(vocab)?;
    pair.question.validate(vocab)?;
    pair.answer.validate(vocab)?;
    let (n_q, n_a) = (pair.question.len(), pair.answer.len());
    if n_q == 0 || n_a == 0 {
        return Err(Error::MalformedPair("empty question or answer".into()));
    }
    let lps = model.sequence_logprobs(conditioning.trimmed(vocab), &pair.joined(vocab))?;
    Ok(pair_average(&lps, n_q, n_a))
}

/// Candidates from one diverse-beam run plus how many generations failed
/// to parse.
#[derive(Debug, Clone, Default)]
pub struct QaCandidates {
    pub pairs: Vec<QAPair>,
    pub dropped: usize,
}

/// Diverse-beam q-a generation on `summary`; `ll_summ` comes from the
/// generation-time token scores.
pub fn generate_qa_candidates<M: Seq2Seq + ?Sized>(
    model: &M,
    summary: &TokenSequence,
    config: &GenerationConfig,
) -> Result<QaCandidates> {
    if config.mode != DecodeMode::DiverseBeam {
        return Err(Error::InvalidConfig("q-a generation requires diverse-beam decoding".into()));
    }
    let vocab = model.vocab();
    let mut out = QaCandidates::default();
    for seq in generate(model, summary, config)? {
        match parse_qa(&seq.sequence, vocab) {
            Ok((q, a)) => {
                let ll = pair_average(&seq.per_token_logprobs, q.len(), a.len());
                out.pairs.push(QAPair::new(q, a, ll, vocab));
            }
            Err(_) => out.dropped += 1,
        }
    }
    Ok(out)
}

/// Better pair first: higher `ll_summ`, then shorter question, then
/// lexicographically smaller question ids.
fn rank(a: &QAPair, b: &QAPair) -> Ordering {
    b.ll_summ
        .total_cmp(&a.ll_summ)
        .then(a.question.len().cmp(&b.question.len()))
        .then_with(|| a.question.ids.cmp(&b.question.ids))
}

/// Keeps pairs whose normalized answer occurs in the normalized summary,
/// then the best pair per distinct answer. Output is best-first.
pub fn filter_qa(pairs: &[QAPair], summary_text: &str) -> Vec<QAPair> {
    let summary = normalize_text(summary_text);
    let mut best: HashMap<&str, &QAPair> = HashMap::new();
    for p in pairs {
        if p.normalized_answer.is_empty() || !summary.contains(&p.normalized_answer) {
            continue;
        }
        best.entry(&p.normalized_answer)
            .and_modify(|cur| {
                if rank(p, cur) == Ordering::Less {
                    *cur = p;
                }
            })
            .or_insert(p);
    }
    let mut kept: Vec<QAPair> = best.into_values().cloned().collect();
    kept.sort_by(|a, b| rank(a, b).then_with(|| a.normalized_answer.cmp(&b.normalized_answer)));
    kept
}

/// One supervised example for QAGen fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaTriple {
    pub context: String,
    pub question: String,
    pub answer: String,
}

impl QaTriple {
    /// `(context, question <a> answer)` as a training pair.
    pub fn to_training_pair(&self, vocab: &Vocabulary) -> Result<(TokenSequence, TokenSequence)> {
        let context = vocab.encode(&self.context)?;
        let q = vocab.encode(&self.question)?;
        let a = vocab.encode(&self.answer)?;
        if q.is_empty() || a.is_empty() {
            return Err(Error::InvalidInput("question and answer must be non-empty".into()));
        }
        let mut ids = q.ids;
        ids.push(vocab.sep());
        ids.extend(a.ids);
        Ok((context, TokenSequence::new(ids)))
    }
}

/// Reads `{"context","question","answer"}` lines; blank lines are skipped.
pub fn read_qa_triples(path: &Path) -> Result<Vec<QaTriple>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: QaTriple = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}
