use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConseqConfig, ConseqExample, ContrastivePair, Origin, Reward, RewardFunction, RewardNormalizer, ScoredSummary};
use crate::error::{Error, Result};
use crate::seqmodel::toy::mix;
use crate::seqmodel::{generate, Seq2Seq, TokenSequence, Vocabulary};

/// `ceil(p% of n)`, at least one when `n > 0`.
pub fn select_count(p: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    // tolerance keeps exact products such as 40% of 5 from rounding up
    let k = (p * n as f64 / 100.0 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Highest reward first; ties by ascending doc id.
pub fn rank_desc(a: &ScoredSummary, b: &ScoredSummary) -> Ordering {
    b.reward.rank_cmp(&a.reward).then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// The top `ceil(p% * N)` ground-truth summaries.
pub fn build_positive_pool(ground_truth: &[ScoredSummary], p: f64) -> Result<Vec<ScoredSummary>> {
    if ground_truth.is_empty() {
        return Err(Error::InvalidInput("no ground-truth summaries".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidConfig(format!("p = {p} must lie in (0, 100]")));
    }
    let mut sorted = ground_truth.to_vec();
    sorted.sort_by(rank_desc);
    sorted.truncate(select_count(p, ground_truth.len()));
    Ok(sorted)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Sampling seed for one document, independent of processing order.
pub fn doc_seed(base: u64, iteration: u64, doc_id: &str) -> u64 {
    mix(mix(base, iteration), fnv1a(doc_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativePool {
    /// The bottom `ceil(p%)` of the per-document minima, lowest first.
    pub pool: Vec<ScoredSummary>,
    /// Lowest-reward sample of every document that was sampled successfully.
    pub minima: Vec<ScoredSummary>,
    /// Every scored sample, grouped by document in input order.
    pub samples: Vec<ScoredSummary>,
    pub skipped: Vec<String>,
}

/// Draws, scores and keeps the worst sample per document.
pub(crate) fn sample_doc<M: Seq2Seq + ?Sized>(
    model: &M,
    ex: &ConseqExample,
    reward: &dyn RewardFunction,
    config: &ConseqConfig,
    iteration: u64,
) -> Result<Vec<ScoredSummary>> {
    let vocab = model.vocab();
    let seed = doc_seed(config.seed, iteration, &ex.id);
    let samples = generate(model, &ex.document, &config.sampling(seed))?;
    samples
        .into_iter()
        .enumerate()
        .map(|(index, s)| {
            let summary = strip_eos(&s.sequence, vocab);
            let r = reward.score(&ex.document, &summary, Some(&ex.reference))?;
            Ok(ScoredSummary {
                doc_id: ex.id.clone(),
                summary,
                origin: Origin::Sampled { seed, index },
                reward: r,
            })
        })
        .collect()
}

pub(crate) fn strip_eos(seq: &TokenSequence, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = seq.trimmed(vocab).to_vec();
    if ids.last() == Some(&vocab.eos()) {
        ids.pop();
    }
    TokenSequence::new(ids)
}

/// Lowest reward; ties go to the earlier sample.
pub(crate) fn doc_minimum(samples: &[ScoredSummary]) -> Option<&ScoredSummary> {
    samples
        .iter()
        .reduce(|best, s| if s.reward.rank_cmp(&best.reward) == Ordering::Less { s } else { best })
}

/// Lowest first; ties by ascending doc id.
pub(crate) fn rank_asc(a: &ScoredSummary, b: &ScoredSummary) -> Ordering {
    a.reward.rank_cmp(&b.reward).then_with(|| a.doc_id.cmp(&b.doc_id))
}

pub(crate) fn bottom_pool(minima: &[ScoredSummary], p: f64) -> Vec<ScoredSummary> {
    let mut sorted = minima.to_vec();
    sorted.sort_by(rank_asc);
    sorted.truncate(select_count(p, minima.len()));
    sorted
}

/// Samples `negatives_per_doc` summaries per document and keeps the bottom
/// `ceil(p%)` of the per-document minima. Documents whose sampling or
/// scoring fails are skipped and logged.
pub fn sample_negative_pool<M: Seq2Seq + ?Sized>(
    model: &M,
    docs: &[ConseqExample],
    reward: &dyn RewardFunction,
    config: &ConseqConfig,
    iteration: u64,
) -> Result<NegativePool> {
    config.validate()?;
    let per_doc: Vec<(String, Result<Vec<ScoredSummary>>)> = docs
        .par_iter()
        .map(|ex| (ex.id.clone(), sample_doc(model, ex, reward, config, iteration)))
        .collect();
    let mut out = NegativePool {
        pool: Vec::new(),
        minima: Vec::new(),
        samples: Vec::new(),
        skipped: Vec::new(),
    };
    for (id, res) in per_doc {
        match res {
            Ok(samples) => {
                if let Some(m) = doc_minimum(&samples) {
                    out.minima.push(m.clone());
                }
                out.samples.extend(samples);
            }
            Err(e) => {
                log::warn!("skipping document {id}: {e}");
                out.skipped.push(id);
            }
        }
    }
    out.pool = bottom_pool(&out.minima, config.p);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    /// Sorted by doc id.
    pub pairs: Vec<ContrastivePair>,
    /// Documents in both pools whose negative outranked the positive.
    pub inverted: Vec<String>,
    /// Shared documents whose positive is unscorable.
    pub unscorable_positive: Vec<String>,
    pub normalizer: Option<RewardNormalizer>,
}

/// Pairs each document present in both pools. Rewards are normalized over
/// the scored values of both pools. Pairs whose negative outranks the
/// positive, or whose positive is unscorable, are dropped and reported.
pub fn intersect_pools(
    positives: &[ScoredSummary],
    negatives: &[ScoredSummary],
    documents: &HashMap<String, TokenSequence>,
) -> Result<Intersection> {
    let neg: HashMap<&str, &ScoredSummary> = negatives.iter().map(|s| (s.doc_id.as_str(), s)).collect();
    let scored: Vec<f64> = positives
        .iter()
        .chain(negatives)
        .filter_map(|s| s.reward.value())
        .collect();
    let normalizer = RewardNormalizer::fit(&scored).ok();
    let mut pairs = Vec::new();
    let mut inverted = Vec::new();
    let mut unscorable_positive = Vec::new();
    for pos in positives {
        let Some(n) = neg.get(pos.doc_id.as_str()) else {
            continue;
        };
        if !pos.reward.is_scored() {
            unscorable_positive.push(pos.doc_id.clone());
            continue;
        }
        if pos.reward.rank_cmp(&n.reward) == Ordering::Less {
            inverted.push(pos.doc_id.clone());
            continue;
        }
        let input = documents
            .get(&pos.doc_id)
            .ok_or_else(|| Error::InvalidInput(format!("no document for id {:?}", pos.doc_id)))?;
        let norm = |r: Reward| normalizer.map_or(0.5, |z| z.apply_reward(r));
        pairs.push(ContrastivePair {
            doc_id: pos.doc_id.clone(),
            input: input.clone(),
            positive: pos.clone(),
            negative: (*n).clone(),
            r_pos: norm(pos.reward),
            r_neg: norm(n.reward),
        });
    }
    pairs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    inverted.sort();
    unscorable_positive.sort();
    if pairs.is_empty() {
        log::warn!("positive and negative pools share no document");
    }
    Ok(Intersection {
        pairs,
        inverted,
        unscorable_positive,
        normalizer,
    })
}

/// One line of a pool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLine {
    pub doc_id: String,
    pub positive: String,
    pub negative: String,
    pub r_pos: Option<f64>,
    pub r_neg: Option<f64>,
}

impl PoolLine {
    pub fn from_pair(p: &ContrastivePair, vocab: &Vocabulary) -> Self {
        PoolLine {
            doc_id: p.doc_id.clone(),
            positive: vocab.decode(&p.positive.summary.ids),
            negative: vocab.decode(&p.negative.summary.ids),
            r_pos: p.positive.reward.value(),
            r_neg: p.negative.reward.value(),
        }
    }
}

pub fn write_pool_file(path: &Path, lines: &[PoolLine]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pool_file(path: &Path) -> Result<Vec<PoolLine>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
