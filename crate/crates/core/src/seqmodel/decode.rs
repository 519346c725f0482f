//! Beam, diverse-beam (Hamming diversity) and top-k sampling decoders.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::mix;
use super::vocab::{TokenId, TokenSequence};
use super::{ScoredSequence, Seq2Seq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Beam,
    DiverseBeam,
    TopkSample,
}

/// Decoding parameters.
///
/// Lengths count content tokens (end-of-sequence excluded). End-of-sequence
/// is masked until `min_len` content tokens exist; a hypothesis reaching
/// `max_len` content tokens is closed without one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub num_groups: usize,
    pub diversity_strength: f64,
    pub top_k: usize,
    pub num_samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    /// Beam 6 with 10-60 tokens, the short-summary evaluation profile.
    fn default() -> Self {
        GenerationConfig {
            mode: DecodeMode::Beam,
            beam_width: 6,
            num_groups: 1,
            diversity_strength: 0.0,
            top_k: 50,
            num_samples: 1,
            min_len: 10,
            max_len: 60,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn beam(width: usize) -> Self {
        GenerationConfig {
            mode: DecodeMode::Beam,
            beam_width: width,
            ..Default::default()
        }
    }

    /// `groups` groups of width one, the q-a generation setting.
    pub fn diverse_beam(groups: usize, strength: f64) -> Self {
        GenerationConfig {
            mode: DecodeMode::DiverseBeam,
            beam_width: groups,
            num_groups: groups,
            diversity_strength: strength,
            ..Default::default()
        }
    }

    pub fn topk(k: usize, num_samples: usize, seed: u64) -> Self {
        GenerationConfig {
            mode: DecodeMode::TopkSample,
            top_k: k,
            num_samples,
            seed,
            ..Default::default()
        }
    }

    /// Beam 4 with 55-140 tokens, the multi-sentence summary profile.
    pub fn long_summary_profile() -> Self {
        GenerationConfig {
            beam_width: 4,
            min_len: 55,
            max_len: 140,
            ..Default::default()
        }
    }

    pub fn with_lengths(mut self, min_len: usize, max_len: usize) -> Self {
        self.min_len = min_len;
        self.max_len = max_len;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.beam_width == 0 || self.num_groups == 0 || self.num_samples == 0 || self.top_k == 0 {
            return bad("beam_width, num_groups, num_samples and top_k must be positive".into());
        }
        if self.mode == DecodeMode::DiverseBeam && self.beam_width % self.num_groups != 0 {
            return bad(format!(
                "beam_width {} not divisible by {} groups",
                self.beam_width, self.num_groups
            ));
        }
        if !(self.diversity_strength >= 0.0 && self.diversity_strength.is_finite()) {
            return bad(format!("diversity strength {} must be finite and >= 0", self.diversity_strength));
        }
        if self.mode == DecodeMode::TopkSample && self.top_k > vocab_size {
            return bad(format!("top_k {} exceeds vocabulary size {vocab_size}", self.top_k));
        }
        if self.max_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length limits {}..{}", self.min_len, self.max_len));
        }
        Ok(())
    }
}

/// Decodes according to `config.mode`.
///
/// Beam returns the final beam sorted by total log-probability. Diverse beam
/// returns groups in order, each sorted by its penalized search score.
/// Sampling returns `num_samples` sequences, sample `i` drawn from its own
/// stream seeded by `(seed, i)`.
pub fn generate<M: Seq2Seq + ?Sized>(
    model: &M,
    input: &TokenSequence,
    config: &GenerationConfig,
) -> Result<Vec<ScoredSequence>> {
    let vocab = model.vocab();
    config.validate(vocab.len())?;
    input.validate(vocab)?;
    let input = input.trimmed(vocab);
    match config.mode {
        DecodeMode::Beam => group_beam_search(model, input, config, 1, config.beam_width, 0.0),
        DecodeMode::DiverseBeam => group_beam_search(
            model,
            input,
            config,
            config.num_groups,
            config.beam_width / config.num_groups,
            config.diversity_strength,
        ),
        DecodeMode::TopkSample => (0..config.num_samples)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, i as u64));
                sample_topk(model, input, config, &mut rng)
            })
            .collect(),
    }
}

/// Argmax decoding under the config's length limits; ties go to the lower id.
pub fn greedy<M: Seq2Seq + ?Sized>(
    model: &M,
    input: &TokenSequence,
    config: &GenerationConfig,
) -> Result<ScoredSequence> {
    let vocab = model.vocab();
    config.validate(vocab.len())?;
    input.validate(vocab)?;
    let input = input.trimmed(vocab);
    let eos = vocab.eos();
    let (mut ids, mut lps) = (Vec::new(), Vec::new());
    while ids.len() < config.max_len {
        let row = model.next_token_logprobs(input, &ids)?;
        let Some((tok, lp)) = ranked_candidates(model, &row, ids.len(), config.min_len).into_iter().next() else {
            break;
        };
        ids.push(tok);
        lps.push(lp);
        if tok == eos {
            break;
        }
    }
    Ok(ScoredSequence::from_parts(ids, lps))
}

/// Greedily extends a forced `prefix` until end-of-sequence or `max_new`
/// tokens. Returns only the new tokens (end-of-sequence included if emitted).
pub fn greedy_continue<M: Seq2Seq + ?Sized>(
    model: &M,
    input: &[TokenId],
    prefix: &[TokenId],
    max_new: usize,
) -> Result<ScoredSequence> {
    let eos = model.vocab().eos();
    let mut ids = prefix.to_vec();
    let mut lps = Vec::new();
    for _ in 0..max_new {
        let row = model.next_token_logprobs(input, &ids)?;
        let Some((tok, lp)) = ranked_candidates(model, &row, usize::MAX, 0).into_iter().next() else {
            break;
        };
        ids.push(tok);
        lps.push(lp);
        if tok == eos {
            break;
        }
    }
    Ok(ScoredSequence::from_parts(ids[prefix.len()..].to_vec(), lps))
}

/// Allowed next tokens sorted by log-prob (desc), then id (asc).
fn ranked_candidates<M: Seq2Seq + ?Sized>(
    model: &M,
    row: &[f64],
    content_len: usize,
    min_len: usize,
) -> Vec<(TokenId, f64)> {
    let vocab = model.vocab();
    let eos = vocab.eos();
    let mut c: Vec<(TokenId, f64)> = row
        .iter()
        .enumerate()
        .map(|(t, &lp)| (t as TokenId, lp))
        .filter(|&(t, lp)| lp.is_finite() && vocab.is_emittable(t) && !(t == eos && content_len < min_len))
        .collect();
    // min_len cannot be honored when end-of-sequence is the only option
    if c.is_empty() && row[eos as usize].is_finite() {
        c.push((eos, row[eos as usize]));
    }
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    c
}

fn sample_topk<M: Seq2Seq + ?Sized>(
    model: &M,
    input: &[TokenId],
    config: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ScoredSequence> {
    let eos = model.vocab().eos();
    let (mut ids, mut lps) = (Vec::new(), Vec::new());
    while ids.len() < config.max_len {
        let row = model.next_token_logprobs(input, &ids)?;
        let mut cands = ranked_candidates(model, &row, ids.len(), config.min_len);
        cands.truncate(config.top_k);
        if cands.is_empty() {
            break;
        }
        let top = cands[0].1;
        let weights: Vec<f64> = cands.iter().map(|&(_, lp)| (lp - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        let u: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = cands.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let (tok, lp) = cands[pick];
        ids.push(tok);
        lps.push(lp);
        if tok == eos {
            break;
        }
    }
    Ok(ScoredSequence::from_parts(ids, lps))
}

#[derive(Clone)]
struct Hyp {
    ids: Vec<TokenId>,
    lps: Vec<f64>,
    /// Cumulative search score, including diversity penalties.
    score: f64,
    done: bool,
}

struct Cand<'a> {
    parent: &'a Hyp,
    token: Option<(TokenId, f64)>,
    score: f64,
}

impl Cand<'_> {
    fn step_lp(&self) -> f64 {
        self.token.map_or(f64::INFINITY, |(_, lp)| lp)
    }

    fn cmp_ids(&self, other: &Cand) -> Ordering {
        let a = self.parent.ids.iter().chain(self.token.iter().map(|(t, _)| t));
        let b = other.parent.ids.iter().chain(other.token.iter().map(|(t, _)| t));
        a.cmp(b)
    }
}

/// Time-synchronous group beam search. Group `g` sees, at every step, a
/// penalty of `lambda` per earlier-group beam that chose the same token at
/// that step. Finished hypotheses are frozen and keep competing on score.
fn group_beam_search<M: Seq2Seq + ?Sized>(
    model: &M,
    input: &[TokenId],
    config: &GenerationConfig,
    groups: usize,
    width: usize,
    lambda: f64,
) -> Result<Vec<ScoredSequence>> {
    let eos = model.vocab().eos();
    let root = Hyp {
        ids: Vec::new(),
        lps: Vec::new(),
        score: 0.0,
        done: false,
    };
    let mut beams: Vec<Vec<Hyp>> = vec![vec![root]; groups];

    for _step in 0..=config.max_len {
        if beams.iter().flatten().all(|h| h.done) {
            break;
        }
        let mut chosen: HashMap<TokenId, usize> = HashMap::new();
        for beam in beams.iter_mut() {
            if beam.iter().all(|h| h.done) {
                continue;
            }
            let mut cands: Vec<Cand> = Vec::new();
            for h in beam.iter() {
                if h.done {
                    cands.push(Cand {
                        parent: h,
                        token: None,
                        score: h.score,
                    });
                    continue;
                }
                let row = model.next_token_logprobs(input, &h.ids)?;
                for (tok, lp) in ranked_candidates(model, &row, h.ids.len(), config.min_len) {
                    let penalty = lambda * chosen.get(&tok).copied().unwrap_or(0) as f64;
                    cands.push(Cand {
                        parent: h,
                        token: Some((tok, lp)),
                        score: h.score + lp - penalty,
                    });
                }
            }
            cands.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(b.step_lp().total_cmp(&a.step_lp()))
                    .then_with(|| a.cmp_ids(b))
            });
            cands.truncate(width);
            let next: Vec<Hyp> = cands
                .iter()
                .map(|c| match c.token {
                    None => c.parent.clone(),
                    Some((tok, lp)) => {
                        let mut h = c.parent.clone();
                        h.ids.push(tok);
                        h.lps.push(lp);
                        h.score = c.score;
                        let content = h.ids.iter().filter(|&&t| t != eos).count();
                        h.done = tok == eos || content >= config.max_len;
                        h
                    }
                })
                .collect();
            for c in &cands {
                if let Some((tok, _)) = c.token {
                    *chosen.entry(tok).or_insert(0) += 1;
                }
            }
            *beam = next;
        }
    }

    Ok(beams
        .into_iter()
        .flatten()
        .map(|h| ScoredSequence::from_parts(h.ids, h.lps))
        .collect())
}
