//! Sequence-to-sequence model abstraction.
//!
//! Every algorithm in the crate talks to a model only through [`Seq2Seq`]:
//! "give me the next-token log-distribution for this input and output prefix".
//! Training code additionally needs [`Trainable`], which exposes a flat
//! parameter vector and a vector-Jacobian product over per-token log-probs.
//!
//! Toy backends live in [`toy`] (uniform and table-driven models, exact
//! oracles) and [`pointer`] (a small trainable pointer-generator recurrence).

mod decode;
pub mod pointer;
pub mod toy;
mod train;
mod vocab;

pub use decode::{generate, greedy, greedy_continue, DecodeMode, GenerationConfig};
pub use pointer::{PointerRnn, PointerRnnConfig};
pub use toy::{TableModel, UniformModel};
pub use train::{
    load_checkpoint, mle_fit, mle_loss, save_checkpoint, train_step_mle, Checkpoint, LossGrad, Optimizer,
};
pub use vocab::{TokenId, TokenSequence, Vocabulary};

use crate::error::{Error, Result};

/// Any backend able to produce a next-token log-distribution.
///
/// Implementations must be safe to query from several threads at once;
/// generation and scoring never mutate the model.
pub trait Seq2Seq: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Log-probabilities over the full vocabulary for the token following
    /// `prefix`, given `input`. Entries for impossible tokens are `-inf`.
    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>>;

    /// Log-probability of every token of `output` given its prefix.
    ///
    /// The default walks the sequence one step at a time; backends with a
    /// cheaper single pass override it.
    fn sequence_logprobs(&self, input: &[TokenId], output: &[TokenId]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(output.len());
        for t in 0..output.len() {
            let dist = self.next_token_logprobs(input, &output[..t])?;
            out.push(dist[output[t] as usize]);
        }
        Ok(out)
    }
}

/// A backend with a flat, differentiable parameter vector.
pub trait Trainable: Seq2Seq {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Runs a forward pass over `output`, asks `coeffs` for `dL/d logp_t`
    /// given the per-token log-probs, and accumulates
    /// `sum_t coeff_t * grad(logp_t)` into `grad`. Returns the log-probs.
    fn backward(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        coeffs: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        grad: &mut [f64],
    ) -> Result<Vec<f64>>;
}

impl<T: Seq2Seq + ?Sized> Seq2Seq for &T {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_token_logprobs(input, prefix)
    }
    fn sequence_logprobs(&self, input: &[TokenId], output: &[TokenId]) -> Result<Vec<f64>> {
        (**self).sequence_logprobs(input, output)
    }
}

impl<T: Seq2Seq + ?Sized> Seq2Seq for Box<T> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_token_logprobs(input, prefix)
    }
    fn sequence_logprobs(&self, input: &[TokenId], output: &[TokenId]) -> Result<Vec<f64>> {
        (**self).sequence_logprobs(input, output)
    }
}

/// A decoded or scored output together with its log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub sequence: TokenSequence,
    pub total_logprob: f64,
    pub avg_logprob: f64,
    pub per_token_logprobs: Vec<f64>,
}

impl ScoredSequence {
    pub(crate) fn from_parts(ids: Vec<TokenId>, per_token_logprobs: Vec<f64>) -> Self {
        let total: f64 = per_token_logprobs.iter().sum();
        let avg = if per_token_logprobs.is_empty() {
            0.0
        } else {
            total / per_token_logprobs.len() as f64
        };
        ScoredSequence {
            sequence: TokenSequence::new(ids),
            total_logprob: total,
            avg_logprob: avg,
            per_token_logprobs,
        }
    }
}

/// Scores `output` given `input` token by token.
///
/// Trailing padding on `input` is ignored.
pub fn score_sequence<M: Seq2Seq + ?Sized>(
    model: &M,
    input: &TokenSequence,
    output: &TokenSequence,
) -> Result<ScoredSequence> {
    if output.is_empty() {
        return Err(Error::InvalidInput("output sequence is empty".into()));
    }
    let vocab = model.vocab();
    input.validate(vocab)?;
    output.validate(vocab)?;
    let lps = model.sequence_logprobs(input.trimmed(vocab), &output.ids)?;
    let mut scored = ScoredSequence::from_parts(output.ids.clone(), lps);
    scored.sequence.text = output.text.clone();
    Ok(scored)
}

/// Converts logits into log-probabilities restricted to `allowed` tokens.
pub(crate) fn log_softmax_masked(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}
