//! Reference QA-based consistency pipeline: extract answers from the
//! summary, generate questions about them, answer each question against both
//! the summary and the document, and compare the answers by token F1.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{generate, greedy_continue, GenerationConfig, Seq2Seq, TokenId, TokenSequence, Vocabulary};

/// Word-overlap F1 on lowercased whitespace tokens (multiset counts).
/// Two empty strings agree perfectly; one empty side scores zero.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta: Vec<String> = a.split_whitespace().map(str::to_lowercase).collect();
    let tb: Vec<String> = b.split_whitespace().map(str::to_lowercase).collect();
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &ta {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &tb {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / tb.len() as f64;
    let r = overlap as f64 / ta.len() as f64;
    2.0 * p * r / (p + r)
}

/// Function words never returned as answers.
pub const STOP_WORDS: [&str; 36] = [
    "a", "an", "the", "this", "that", "these", "those", "it", "its", "he", "she", "they", "them", "his", "her",
    "their", "we", "you", "i", "who", "what", "which", "is", "was", "are", "were", "be", "in", "on", "at", "of",
    "to", "for", "and", "or", "with",
];

const DETERMINERS: [&str; 7] = ["a", "an", "the", "this", "that", "these", "those"];

pub trait AnswerExtractor: Send + Sync {
    fn extract(&self, text: &str) -> Vec<String>;
}

pub trait QuestionGenerator: Send + Sync {
    /// Up to `keep` questions about `answer`, best first, from a beam of
    /// width `beam`.
    fn questions(&self, summary: &str, answer: &str, beam: usize, keep: usize) -> Result<Vec<String>>;
}

pub trait QuestionAnswerer: Send + Sync {
    /// The answer span, or empty text for "no answer".
    fn answer(&self, question: &str, context: &str) -> Result<String>;
}

impl<F: Fn(&str) -> Vec<String> + Send + Sync> AnswerExtractor for F {
    fn extract(&self, text: &str) -> Vec<String> {
        self(text)
    }
}

impl<F: Fn(&str, &str) -> Result<Vec<String>> + Send + Sync> QuestionGenerator for F {
    fn questions(&self, summary: &str, answer: &str, _beam: usize, keep: usize) -> Result<Vec<String>> {
        let mut q = self(summary, answer)?;
        q.truncate(keep);
        Ok(q)
    }
}

impl<F: Fn(&str, &str) -> Result<String> + Send + Sync> QuestionAnswerer for F {
    fn answer(&self, question: &str, context: &str) -> Result<String> {
        self(question, context)
    }
}

/// Capitalized or digit-bearing token runs plus determiner-noun chunks,
/// in order of first occurrence, case-insensitively deduplicated.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicExtractor {
    pub max_answers: usize,
}

impl Default for HeuristicExtractor {
    fn default() -> Self {
        HeuristicExtractor { max_answers: 10 }
    }
}

fn is_stop(w: &str) -> bool {
    STOP_WORDS.contains(&w.to_lowercase().as_str())
}

impl AnswerExtractor for HeuristicExtractor {
    fn extract(&self, text: &str) -> Vec<String> {
        extract_answers(text, self.max_answers)
    }
}

pub fn extract_answers(text: &str, max_answers: usize) -> Vec<String> {
    // (start position, span) so chunks from both rules interleave by position
    let mut found: Vec<(usize, String)> = Vec::new();
    let raw: Vec<&str> = text.split_whitespace().collect();
    let clean: Vec<&str> = raw
        .iter()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .collect();
    // a token ending in punctuation closes any span it belongs to
    let closes = |i: usize| raw[i].ends_with(|c: char| !c.is_alphanumeric());
    let salient = |w: &str| {
        !w.is_empty()
            && !is_stop(w)
            && (w.chars().next().is_some_and(char::is_uppercase) || w.chars().any(|c| c.is_ascii_digit()))
    };

    let mut i = 0;
    while i < clean.len() {
        if salient(clean[i]) {
            let start = i;
            while i + 1 < clean.len() && !closes(i) && salient(clean[i + 1]) {
                i += 1;
            }
            found.push((start, clean[start..=i].join(" ")));
        }
        i += 1;
    }
    for i in 0..clean.len().saturating_sub(1) {
        let (d, n) = (clean[i], clean[i + 1]);
        if DETERMINERS.contains(&d.to_lowercase().as_str())
            && !closes(i)
            && !n.is_empty()
            && !is_stop(n)
            && n.chars().all(|c| c.is_lowercase())
        {
            found.push((i, format!("{d} {n}")));
        }
    }
    found.sort_by_key(|(pos, _)| *pos);
    let mut seen = std::collections::HashSet::new();
    found
        .into_iter()
        .map(|(_, s)| s)
        .filter(|s| seen.insert(s.to_lowercase()))
        .take(max_answers)
        .collect()
}

fn encode(vocab: &Vocabulary, text: &str) -> Result<Vec<TokenId>> {
    Ok(vocab.encode(text)?.ids)
}

/// Question generation with any seq2seq backend whose input is
/// `summary <a> answer`.
pub struct ModelQuestionGenerator<M> {
    pub model: M,
    pub max_len: usize,
}

impl<M: Seq2Seq> QuestionGenerator for ModelQuestionGenerator<M> {
    fn questions(&self, summary: &str, answer: &str, beam: usize, keep: usize) -> Result<Vec<String>> {
        let vocab = self.model.vocab();
        let mut input = encode(vocab, summary)?;
        input.push(vocab.sep());
        input.extend(encode(vocab, answer)?);
        let cfg = GenerationConfig::beam(beam).with_lengths(0, self.max_len);
        let mut out: Vec<String> = Vec::new();
        for s in generate(&self.model, &TokenSequence::new(input), &cfg)? {
            if s.total_logprob == f64::NEG_INFINITY {
                continue;
            }
            let q = vocab.decode(&s.sequence.ids);
            if !q.is_empty() && !out.contains(&q) {
                out.push(q);
            }
            if out.len() == keep {
                break;
            }
        }
        Ok(out)
    }
}

/// Extractive QA with a QAGen-format backend: the question and separator are
/// forced, then the answer is decoded greedily.
pub struct ModelQuestionAnswerer<M> {
    pub model: M,
    pub max_len: usize,
}

impl<M: Seq2Seq> QuestionAnswerer for ModelQuestionAnswerer<M> {
    fn answer(&self, question: &str, context: &str) -> Result<String> {
        let vocab = self.model.vocab();
        let ctx = encode(vocab, context)?;
        let mut prefix = encode(vocab, question)?;
        prefix.push(vocab.sep());
        let out = greedy_continue(&self.model, &ctx, &prefix, self.max_len)?;
        Ok(vocab.decode(&out.sequence.ids))
    }
}

/// A parameter-free question generator over `context <a> answer` inputs:
/// the questions about an answer are the one- and two-token runs that
/// immediately precede it in the context (not crossing boundary tokens).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClozeQuestionModel {
    vocab: Vocabulary,
    boundary: Vec<TokenId>,
    max_question_len: usize,
}

impl ClozeQuestionModel {
    pub fn new(vocab: Vocabulary, boundary: &[&str], max_question_len: usize) -> Result<Self> {
        let boundary = boundary
            .iter()
            .map(|w| vocab.id(w).ok_or_else(|| Error::InvalidInput(format!("unknown boundary token {w:?}"))))
            .collect::<Result<_>>()?;
        Ok(ClozeQuestionModel {
            vocab,
            boundary,
            max_question_len: max_question_len.max(1),
        })
    }

    fn questions_for(&self, input: &[TokenId]) -> Vec<Vec<TokenId>> {
        let Some(s) = input.iter().position(|&t| t == self.vocab.sep()) else {
            return Vec::new();
        };
        let (ctx, ans) = (&input[..s], &input[s + 1..]);
        let mut out = Vec::new();
        if ans.is_empty() {
            return out;
        }
        for seg in ctx.split(|t| self.boundary.contains(t) || self.vocab.is_special(*t)) {
            for i in 0..seg.len() {
                if !seg[i..].starts_with(ans) {
                    continue;
                }
                for len in 1..=self.max_question_len.min(i) {
                    out.push(seg[i - len..i].to_vec());
                }
            }
        }
        out
    }
}

impl Seq2Seq for ClozeQuestionModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.vocab.len()];
        for q in self.questions_for(input) {
            if q.len() >= prefix.len() && q.starts_with(prefix) {
                let next = q.get(prefix.len()).copied().unwrap_or(self.vocab.eos());
                counts[next as usize] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            counts[self.vocab.eos() as usize] = 1.0;
        }
        let total: f64 = counts.iter().sum();
        Ok(counts.iter().map(|&c| (c / total).ln()).collect())
    }
}

/// The three pluggable stages and their limits.
pub struct QagsComponents {
    pub extractor: Box<dyn AnswerExtractor>,
    pub generator: Box<dyn QuestionGenerator>,
    pub answerer: Box<dyn QuestionAnswerer>,
    pub max_answers: usize,
    pub questions_per_answer: usize,
    pub qg_beam: usize,
}

impl QagsComponents {
    /// Default limits: 10 answers, top 3 of a width-10 question beam.
    pub fn new(
        extractor: Box<dyn AnswerExtractor>,
        generator: Box<dyn QuestionGenerator>,
        answerer: Box<dyn QuestionAnswerer>,
    ) -> Self {
        QagsComponents {
            extractor,
            generator,
            answerer,
            max_answers: 10,
            questions_per_answer: 3,
            qg_beam: 10,
        }
    }

    /// Heuristic extraction with a cloze question generator and a
    /// QAGen-format answerer over `vocab`.
    pub fn toy<M: Seq2Seq + 'static>(vocab: &Vocabulary, qa_model: M, boundary: &[&str]) -> Result<Self> {
        let qg = ClozeQuestionModel::new(vocab.clone(), boundary, 2)?;
        Ok(QagsComponents::new(
            Box::new(HeuristicExtractor::default()),
            Box::new(ModelQuestionGenerator { model: qg, max_len: 4 }),
            Box::new(ModelQuestionAnswerer { model: qa_model, max_len: 4 }),
        ))
    }

    fn validate(&self) -> Result<()> {
        if self.max_answers == 0 || self.questions_per_answer == 0 || self.qg_beam == 0 {
            return Err(Error::InvalidConfig("QAGS limits must be positive".into()));
        }
        if self.questions_per_answer > self.qg_beam {
            return Err(Error::InvalidConfig("cannot keep more questions than the beam holds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub answer: String,
    pub question: String,
    pub summary_answer: String,
    pub document_answer: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QagsResult {
    /// Absent when no question was produced.
    pub score: Option<f64>,
    pub questions: Vec<QuestionRecord>,
    pub unscorable: bool,
}

pub fn qags_score(document: &str, summary: &str, components: &QagsComponents) -> Result<QagsResult> {
    components.validate()?;
    let mut answers = components.extractor.extract(summary);
    answers.truncate(components.max_answers);
    let per_answer: Vec<Vec<(String, String)>> = answers
        .par_iter()
        .map(|a| {
            let qs = components
                .generator
                .questions(summary, a, components.qg_beam, components.questions_per_answer)
                .map_err(|e| Error::stage("question generation", e))?;
            Ok(qs
                .into_iter()
                .take(components.questions_per_answer)
                .map(|q| (a.clone(), q))
                .collect())
        })
        .collect::<Result<_>>()?;
    let questions: Vec<QuestionRecord> = per_answer
        .into_iter()
        .flatten()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(a, q)| {
            let qa = |ctx: &str| {
                components
                    .answerer
                    .answer(q, ctx)
                    .map_err(|e| Error::stage("question answering", e))
            };
            let (s, d) = (qa(summary)?, qa(document)?);
            Ok(QuestionRecord {
                f1: token_f1(&s, &d),
                answer: a.clone(),
                question: q.clone(),
                summary_answer: s,
                document_answer: d,
            })
        })
        .collect::<Result<_>>()?;
    let n = questions.len();
    Ok(QagsResult {
        score: (n > 0).then(|| questions.iter().map(|q| q.f1).sum::<f64>() / n as f64),
        unscorable: n == 0,
        questions,
    })
}
