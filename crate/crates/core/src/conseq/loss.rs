use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ContrastivePair;
use crate::error::{Error, Result};
use crate::seqmodel::{LossGrad, TokenId, TokenSequence, Trainable, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Plain,
    /// Positive term scaled by `r_pos`, negative term by `1 - r_neg`.
    Weighted,
    /// Negative term dropped; identical to MLE on the positives.
    PositiveOnly,
}

/// How `log(1 - p(s- | x))` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Mean over tokens of `log(1 - p(token | prefix, x))`.
    #[default]
    Token,
    /// `log(1 - exp(sum of token log-probs))`, the sequence log-prob
    /// clamped to at most `-1e-12`.
    Sequence,
}

const SEQ_CLAMP: f64 = -1e-12;

fn scored_ids<'a>(s: &'a TokenSequence, vocab: &Vocabulary, doc_id: &str) -> Result<&'a [TokenId]> {
    s.validate(vocab)?;
    let ids = s.trimmed(vocab);
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!("empty summary in pair {doc_id:?}")));
    }
    Ok(ids)
}

/// `log(1 - exp(lp))` for `lp <= 0`, accurate near both ends.
fn log1m_exp(lp: f64) -> f64 {
    (-lp.exp_m1()).ln()
}

/// Contrastive loss averaged over `pairs`, with its gradient.
///
/// Each pair contributes `-mean_t log p(s+_t)` plus, unless positive-only,
/// the negative term `-log(1 - p(s-))` evaluated per [`NegativeMode`].
/// Sequences are scored exactly as stored (trailing padding aside); the
/// training drivers append end-of-sequence so termination is learned too.
pub fn contrastive_loss<M: Trainable>(
    model: &M,
    pairs: &[ContrastivePair],
    kind: LossKind,
    mode: NegativeMode,
) -> Result<LossGrad> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no contrastive pairs".into()));
    }
    let vocab = model.vocab();
    let n = pairs.len() as f64;
    let dim = model.params().len();
    let parts: Vec<Result<(f64, Vec<f64>)>> = pairs
        .par_iter()
        .map(|pair| {
            let numerical = |detail: String| Error::Numerical {
                pair_id: pair.doc_id.clone(),
                detail,
            };
            let input = pair.input.trimmed(vocab);
            let (w_pos, w_neg) = match kind {
                LossKind::Plain => (1.0, 1.0),
                LossKind::Weighted => (pair.r_pos, 1.0 - pair.r_neg),
                LossKind::PositiveOnly => (1.0, 0.0),
            };
            let mut grad = vec![0.0; dim];

            let pos = scored_ids(&pair.positive.summary, vocab, &pair.doc_id)?;
            let len = pos.len() as f64;
            let lps = model.backward(input, pos, &mut |lps| vec![-w_pos / (len * n); lps.len()], &mut grad)?;
            let mut loss = -w_pos * lps.iter().sum::<f64>() / len;
            if !loss.is_finite() {
                return Err(numerical(format!("positive log-likelihood {loss}")));
            }

            if kind != LossKind::PositiveOnly {
                let neg = scored_ids(&pair.negative.summary, vocab, &pair.doc_id)?;
                let len = neg.len() as f64;
                let mut term = 0.0;
                model.backward(
                    input,
                    neg,
                    &mut |lps| match mode {
                        NegativeMode::Token => {
                            term = -lps.iter().map(|&l| log1m_exp(l)).sum::<f64>() / len;
                            // d/dlp of -log(1 - e^lp) is p / (1 - p)
                            lps.iter().map(|&l| w_neg * (l.exp() / -l.exp_m1()) / (len * n)).collect()
                        }
                        NegativeMode::Sequence => {
                            let s: f64 = lps.iter().sum();
                            let clamped = s.min(SEQ_CLAMP);
                            term = -log1m_exp(clamped);
                            let c = if s > SEQ_CLAMP { 0.0 } else { w_neg * clamped.exp() / -clamped.exp_m1() / n };
                            vec![c; lps.len()]
                        }
                    },
                    &mut grad,
                )?;
                if !term.is_finite() {
                    return Err(numerical(format!("negative term {term}")));
                }
                loss += w_neg * term;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(numerical("non-finite gradient".into()));
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = LossGrad {
        loss: 0.0,
        grad: vec![0.0; dim],
    };
    for part in parts {
        let (loss, grad) = part?;
        total.loss += loss / n;
        total.grad.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
    }
    Ok(total)
}
