use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{Seq2Seq, TokenId, Vocabulary};

/// A parameter-free QAGen backend built from n-gram counts of its input.
///
/// Questions are runs of `question_len` context tokens and the answer is the
/// token that follows them, so `(w1 w2, w3)` is generated for every window
/// `w1 w2 w3` that does not cross a boundary token. In the answer phase the
/// question may have any length: the answer is whatever follows it in the
/// context. Every distribution is mixed with `epsilon` of uniform mass, so
/// pairs absent from a context get a low but finite likelihood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextQaGen {
    vocab: Vocabulary,
    question_len: usize,
    epsilon: f64,
    boundary: Vec<TokenId>,
}

impl ContextQaGen {
    pub fn new(vocab: Vocabulary, question_len: usize, epsilon: f64, boundary: &[&str]) -> Result<Self> {
        if question_len == 0 {
            return Err(Error::InvalidConfig("question length must be positive".into()));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("smoothing {epsilon} must lie in (0, 1)")));
        }
        let boundary = boundary
            .iter()
            .map(|w| {
                vocab
                    .id(w)
                    .ok_or_else(|| Error::InvalidInput(format!("boundary token {w:?} not in vocabulary")))
            })
            .collect::<Result<_>>()?;
        Ok(ContextQaGen {
            vocab,
            question_len,
            epsilon,
            boundary,
        })
    }

    pub fn question_len(&self) -> usize {
        self.question_len
    }

    fn segments<'a>(&self, input: &'a [TokenId]) -> Vec<&'a [TokenId]> {
        input
            .split(|t| self.boundary.contains(t) || self.vocab.is_special(*t))
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Unnormalized candidate counts for the next token.
    fn counts(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let mut counts = vec![0.0; self.vocab.len()];
        let eos = self.vocab.eos() as usize;
        match prefix.iter().position(|&t| t == self.vocab.sep()) {
            Some(s) if s + 1 == prefix.len() => {
                let q = &prefix[..s];
                for seg in self.segments(input) {
                    for i in 0..seg.len() {
                        if i + q.len() < seg.len() && seg[i..].starts_with(q) {
                            counts[seg[i + q.len()] as usize] += 1.0;
                        }
                    }
                }
            }
            Some(_) => counts[eos] = 1.0,
            None if prefix.len() < self.question_len => {
                let k = prefix.len();
                for seg in self.segments(input) {
                    for w in seg.windows(self.question_len + 1) {
                        if w.starts_with(prefix) {
                            counts[w[k] as usize] += 1.0;
                        }
                    }
                }
            }
            None if prefix.len() == self.question_len => counts[self.vocab.sep() as usize] = 1.0,
            None => counts[eos] = 1.0,
        }
        if counts.iter().all(|&c| c == 0.0) {
            counts[eos] = 1.0;
        }
        counts
    }
}

impl Seq2Seq for ContextQaGen {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let counts = self.counts(input, prefix);
        let total: f64 = counts.iter().sum();
        let floor = self.epsilon / self.vocab.emittable_count() as f64;
        Ok(counts
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                if self.vocab.is_emittable(t as TokenId) {
                    ((1.0 - self.epsilon) * c / total + floor).ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }
}
