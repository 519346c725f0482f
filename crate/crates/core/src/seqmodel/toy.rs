//! Parameter-free toy backends with exactly known conditionals.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use super::Seq2Seq;
use crate::error::{Error, Result};

/// Uniform next-token distribution over a fixed support set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformModel {
    vocab: Vocabulary,
    support: Vec<TokenId>,
}

impl UniformModel {
    pub fn new(vocab: Vocabulary, mut support: Vec<TokenId>) -> Result<Self> {
        support.sort_unstable();
        support.dedup();
        if support.is_empty() {
            return Err(Error::InvalidInput("uniform model needs a non-empty support".into()));
        }
        if let Some(&bad) = support.iter().find(|&&t| !vocab.is_emittable(t) || t as usize >= vocab.len()) {
            return Err(Error::InvalidInput(format!("token {bad} cannot be emitted")));
        }
        Ok(UniformModel { vocab, support })
    }

    /// Uniform over every non-special token.
    pub fn over_content(vocab: Vocabulary) -> Self {
        let support = (0..vocab.len() as TokenId).filter(|&t| !vocab.is_special(t)).collect();
        UniformModel { vocab, support }
    }
}

impl Seq2Seq for UniformModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_logprobs(&self, _input: &[TokenId], _prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut out = vec![f64::NEG_INFINITY; self.vocab.len()];
        let lp = -(self.support.len() as f64).ln();
        for &t in &self.support {
            out[t as usize] = lp;
        }
        Ok(out)
    }
}

/// What a [`TableModel`] returns for contexts that have no explicit entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Fallback {
    /// Probability one on end-of-sequence.
    Eos,
    /// Uniform over all emittable tokens.
    Uniform,
    /// A fixed pseudo-random distribution per (input, prefix), restricted to
    /// `support`. `sharpness` scales the hashed logits.
    Hashed {
        seed: u64,
        support: Vec<TokenId>,
        sharpness: f64,
    },
}

type TableKey = (Option<Vec<TokenId>>, Vec<TokenId>);

/// Explicit conditional tables keyed by `(input, prefix)`.
///
/// Lookup order: exact `(input, prefix)`, then the input-independent
/// `(None, prefix)` entry, then the fallback.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: Vocabulary,
    entries: HashMap<TableKey, Vec<f64>>,
    fallback: Fallback,
}

impl TableModel {
    /// Hashed fallback over every emittable token.
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        let support = (0..vocab.len() as TokenId).filter(|&t| vocab.is_emittable(t)).collect();
        TableModel {
            vocab,
            entries: HashMap::new(),
            fallback: Fallback::Hashed {
                seed,
                support,
                sharpness: 1.5,
            },
        }
    }

    pub fn with_fallback(vocab: Vocabulary, fallback: Fallback) -> Result<Self> {
        if let Fallback::Hashed { support, .. } = &fallback {
            if support.is_empty() || support.iter().any(|&t| !vocab.is_emittable(t)) {
                return Err(Error::InvalidInput("hashed fallback support must be emittable and non-empty".into()));
            }
        }
        Ok(TableModel {
            vocab,
            entries: HashMap::new(),
            fallback,
        })
    }

    /// A model that emits each `output` (then end-of-sequence) with
    /// certainty for its paired `input`, and ends immediately elsewhere.
    pub fn deterministic(vocab: Vocabulary, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Self {
        let eos = vocab.eos();
        let mut m = TableModel {
            vocab,
            entries: HashMap::new(),
            fallback: Fallback::Eos,
        };
        for (input, output) in pairs {
            let mut body: Vec<TokenId> = output.clone();
            if body.last() == Some(&eos) {
                body.pop();
            }
            for t in 0..=body.len() {
                let next = body.get(t).copied().unwrap_or(eos);
                m.set(Some(input.clone()), body[..t].to_vec(), &[(next, 1.0)])
                    .expect("deterministic entries are valid");
            }
        }
        m
    }

    /// Sets the distribution for one context. `probs` must sum to one.
    pub fn set(&mut self, input: Option<Vec<TokenId>>, prefix: Vec<TokenId>, probs: &[(TokenId, f64)]) -> Result<()> {
        let total: f64 = probs.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("table row sums to {total}")));
        }
        let mut row = vec![f64::NEG_INFINITY; self.vocab.len()];
        for &(t, p) in probs {
            if t as usize >= self.vocab.len() || !self.vocab.is_emittable(t) || p < 0.0 {
                return Err(Error::InvalidInput(format!("bad table entry ({t}, {p})")));
            }
            let cur = row[t as usize];
            row[t as usize] = if cur == f64::NEG_INFINITY { p.ln() } else { (cur.exp() + p).ln() };
        }
        self.entries.insert((input, prefix), row);
        Ok(())
    }

    fn fallback_row(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let n = self.vocab.len();
        match &self.fallback {
            Fallback::Eos => {
                let mut row = vec![f64::NEG_INFINITY; n];
                row[self.vocab.eos() as usize] = 0.0;
                row
            }
            Fallback::Uniform => {
                let lp = -(self.vocab.emittable_count() as f64).ln();
                (0..n as TokenId)
                    .map(|t| if self.vocab.is_emittable(t) { lp } else { f64::NEG_INFINITY })
                    .collect()
            }
            Fallback::Hashed {
                seed,
                support,
                sharpness,
            } => {
                let mut h = mix(*seed, 0x51ED);
                for &t in input {
                    h = mix(h, t as u64 + 1);
                }
                h = mix(h, u64::MAX);
                for &t in prefix {
                    h = mix(h, t as u64 + 1);
                }
                let mut logits = vec![f64::NEG_INFINITY; n];
                for &t in support {
                    let u = (mix(h, t as u64) >> 11) as f64 / (1u64 << 53) as f64;
                    logits[t as usize] = sharpness * (4.0 * u - 2.0);
                }
                super::log_softmax_masked(&logits, |i| logits[i].is_finite())
            }
        }
    }
}

impl Seq2Seq for TableModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        if let Some(row) = self.entries.get(&(Some(input.to_vec()), prefix.to_vec())) {
            return Ok(row.clone());
        }
        if let Some(row) = self.entries.get(&(None, prefix.to_vec())) {
            return Ok(row.clone());
        }
        Ok(self.fallback_row(input, prefix))
    }
}

/// Applies a vocabulary permutation consistently to a wrapped model:
/// the permuted model on permuted sequences behaves exactly like the
/// inner model on the original ones.
pub struct Permuted<M> {
    inner: M,
    vocab: Vocabulary,
    forward: Vec<TokenId>,
    inverse: Vec<TokenId>,
}

impl<M: Seq2Seq> Permuted<M> {
    /// `forward[old] = new`. Special tokens must map to themselves.
    pub fn new(inner: M, forward: Vec<TokenId>) -> Result<Self> {
        let v = inner.vocab();
        if forward.len() != v.len() {
            return Err(Error::InvalidInput("permutation length mismatch".into()));
        }
        let mut inverse = vec![TokenId::MAX; forward.len()];
        for (old, &new) in forward.iter().enumerate() {
            if new as usize >= forward.len() || inverse[new as usize] != TokenId::MAX {
                return Err(Error::InvalidInput("not a permutation".into()));
            }
            inverse[new as usize] = old as TokenId;
        }
        for s in [v.bos(), v.eos(), v.sep(), v.pad()] {
            if forward[s as usize] != s {
                return Err(Error::InvalidInput("special tokens must stay fixed".into()));
            }
        }
        let mut tokens = vec![String::new(); v.len()];
        for (old, &new) in forward.iter().enumerate() {
            tokens[new as usize] = v.tokens()[old].clone();
        }
        let names = |id: TokenId| v.token(id).unwrap().to_string();
        let vocab = Vocabulary::new(tokens, &names(v.bos()), &names(v.eos()), &names(v.sep()), &names(v.pad()))?;
        Ok(Permuted {
            inner,
            vocab,
            forward,
            inverse,
        })
    }

    pub fn apply(&self, ids: &[TokenId]) -> Vec<TokenId> {
        ids.iter().map(|&t| self.forward[t as usize]).collect()
    }
}

impl<M: Seq2Seq> Seq2Seq for Permuted<M> {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let back = |ids: &[TokenId]| ids.iter().map(|&t| self.inverse[t as usize]).collect::<Vec<_>>();
        let row = self.inner.next_token_logprobs(&back(input), &back(prefix))?;
        let mut out = vec![f64::NEG_INFINITY; row.len()];
        for (old, lp) in row.into_iter().enumerate() {
            out[self.forward[old] as usize] = lp;
        }
        Ok(out)
    }
}

pub(crate) fn mix(h: u64, x: u64) -> u64 {
    let mut z = h ^ x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_specials(["a", "b", "c"].map(String::from)).unwrap()
    }

    #[test]
    fn distributions_are_normalized() {
        let v = vocab();
        let models: Vec<Box<dyn Seq2Seq>> = vec![
            Box::new(UniformModel::over_content(v.clone())),
            Box::new(TableModel::new(v.clone(), 11)),
            Box::new(TableModel::with_fallback(v.clone(), Fallback::Uniform).unwrap()),
            Box::new(TableModel::deterministic(v.clone(), &[(vec![4], vec![5, 6])])),
        ];
        for m in &models {
            for prefix in [&[][..], &[4], &[4, 5, 6, 4]] {
                let row = m.next_token_logprobs(&[4, 5], prefix).unwrap();
                let s: f64 = row.iter().map(|l| l.exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert_eq!(row[v.bos() as usize], f64::NEG_INFINITY);
                assert_eq!(row[v.pad() as usize], f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn rows_must_sum_to_one() {
        let mut m = TableModel::new(vocab(), 0);
        assert!(m.set(None, vec![], &[(4, 0.5)]).is_err());
        assert!(m.set(None, vec![], &[(0, 1.0)]).is_err());
    }

    #[test]
    fn permutation_is_consistent() {
        let v = vocab();
        let m = TableModel::new(v.clone(), 5);
        let perm = vec![0, 1, 2, 3, 6, 4, 5];
        let p = Permuted::new(TableModel::new(v, 5), perm).unwrap();
        let row = m.next_token_logprobs(&[4, 5], &[6]).unwrap();
        let prow = p.next_token_logprobs(&p.apply(&[4, 5]), &p.apply(&[6])).unwrap();
        for t in 0..row.len() as TokenId {
            assert_eq!(row[t as usize], prow[p.apply(&[t])[0] as usize]);
        }
    }
}
