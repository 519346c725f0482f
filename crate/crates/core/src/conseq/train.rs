use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pools::{bottom_pool, doc_minimum, sample_doc, strip_eos};
use super::{
    build_positive_pool, contrastive_loss, doc_seed, intersect_pools, ConseqConfig, ConseqExample, ContrastivePair,
    Origin, Reward, RewardFunction, ScoredSummary,
};
use crate::error::{Error, Result};
use crate::seqmodel::toy::mix;
use crate::seqmodel::{generate, greedy, GenerationConfig, Optimizer, TokenId, TokenSequence, Trainable, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub positives: usize,
    pub negatives: usize,
    pub pairs: usize,
    /// Shared documents dropped because the negative outranked the positive
    /// or the positive was unscorable.
    pub inverted: usize,
    /// Documents whose sampling or scoring failed.
    pub skipped_docs: usize,
    /// Mean scored reward of the ground-truth summaries.
    pub mean_reward_ground_truth: Option<f64>,
    /// Mean scored reward of the samples drawn before the update.
    pub mean_reward_before: Option<f64>,
    /// Same seeds, re-sampled after the update (when requested).
    pub mean_reward_after: Option<f64>,
    pub unscorable_before: usize,
    pub unscorable_after: Option<usize>,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConseqReport {
    pub reward: String,
    pub iterations: Vec<IterationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch: usize,
    pub docs: Vec<String>,
    pub positives: usize,
    pub negatives: usize,
    pub pairs: usize,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub reward: String,
    pub batches: Vec<BatchReport>,
    pub skipped_batches: usize,
}

fn mean_scored<'a>(items: impl IntoIterator<Item = &'a ScoredSummary>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut unscorable) = (0.0, 0usize, 0usize);
    for s in items {
        match s.reward.value() {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => unscorable += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), unscorable)
}

fn check_ids(examples: &[ConseqExample]) -> Result<HashMap<String, TokenSequence>> {
    let mut docs = HashMap::with_capacity(examples.len());
    for ex in examples {
        if docs.insert(ex.id.clone(), ex.document.clone()).is_some() {
            return Err(Error::InvalidInput(format!("duplicate document id {:?}", ex.id)));
        }
    }
    Ok(docs)
}

/// Rewards of the reference summaries. A failing reward call makes that
/// reference unscorable rather than aborting the run.
fn score_ground_truth(examples: &[ConseqExample], reward: &dyn RewardFunction) -> Vec<ScoredSummary> {
    examples
        .par_iter()
        .map(|ex| {
            let r = reward
                .score(&ex.document, &ex.reference, Some(&ex.reference))
                .unwrap_or_else(|e| {
                    log::warn!("reference of {} unscorable: {e}", ex.id);
                    Reward::Unscorable
                });
            ScoredSummary {
                doc_id: ex.id.clone(),
                summary: ex.reference.clone(),
                origin: Origin::GroundTruth,
                reward: r,
            }
        })
        .collect()
}

/// Samples every document; failures are logged and counted.
fn sample_all<M: Trainable>(
    model: &M,
    docs: &[ConseqExample],
    reward: &dyn RewardFunction,
    config: &ConseqConfig,
    iteration: u64,
) -> (Vec<Vec<ScoredSummary>>, usize) {
    let results: Vec<_> = docs
        .par_iter()
        .map(|ex| sample_doc(model, ex, reward, config, iteration))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for (ex, r) in docs.iter().zip(results) {
        match r {
            Ok(s) => out.push(s),
            Err(e) => {
                log::warn!("skipping document {}: {e}", ex.id);
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

/// Summaries are trained with end-of-sequence appended.
fn terminated(pairs: &[ContrastivePair], vocab: &Vocabulary) -> Vec<ContrastivePair> {
    pairs
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.positive.summary = TokenSequence::new(p.positive.summary.with_eos(vocab));
            p.negative.summary = TokenSequence::new(p.negative.summary.with_eos(vocab));
            p
        })
        .collect()
}

/// Shuffled index chunks of at most `batch_size`, each chunk sorted.
///
/// Batches hold whole pairs, so a document's positive and negative always
/// land in the same minibatch.
pub fn minibatches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size.max(1))
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Offline contrastive fine-tuning.
///
/// Each outer iteration re-scores the references, re-samples negatives
/// from the current model, intersects the pools and runs `epochs` passes
/// of Adam over the pairs. An empty intersection aborts that iteration
/// only.
pub fn conseq_train<M: Trainable>(
    model: &mut M,
    examples: &[ConseqExample],
    reward: &dyn RewardFunction,
    config: &ConseqConfig,
) -> Result<ConseqReport> {
    config.validate()?;
    let docs = check_ids(examples)?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    let kind = config.variant.loss_kind();
    let mut report = ConseqReport {
        reward: reward.name().to_string(),
        iterations: Vec::new(),
    };
    for iteration in 0..config.outer_iterations {
        let it = iteration as u64;
        let ground_truth = score_ground_truth(examples, reward);
        let positives = build_positive_pool(&ground_truth, config.p)?;
        let (samples, skipped_docs) = sample_all(&*model, examples, reward, config, it);
        let minima: Vec<ScoredSummary> = samples.iter().filter_map(|s| doc_minimum(s).cloned()).collect();
        let negatives = bottom_pool(&minima, config.p);
        let inter = intersect_pools(&positives, &negatives, &docs)?;
        let (mean_before, unscorable_before) = mean_scored(samples.iter().flatten());
        let mut rep = IterationReport {
            iteration,
            positives: positives.len(),
            negatives: negatives.len(),
            pairs: inter.pairs.len(),
            inverted: inter.inverted.len() + inter.unscorable_positive.len(),
            skipped_docs,
            mean_reward_ground_truth: mean_scored(&ground_truth).0,
            mean_reward_before: mean_before,
            mean_reward_after: None,
            unscorable_before,
            unscorable_after: None,
            losses: Vec::new(),
            aborted: None,
        };
        if inter.pairs.is_empty() {
            let why = format!(
                "pools share no usable document ({} positives, {} negatives, {} dropped)",
                positives.len(),
                negatives.len(),
                rep.inverted
            );
            log::warn!("iteration {iteration} aborted: {why}");
            rep.aborted = Some(why);
            report.iterations.push(rep);
            continue;
        }
        let pairs = terminated(&inter.pairs, model.vocab());
        let mut opt = Optimizer::adam(config.learning_rate);
        for epoch in 0..config.epochs {
            let mut total = 0.0;
            let batches = minibatches(pairs.len(), config.batch_size, mix(mix(config.seed, it), epoch as u64));
            for batch in &batches {
                let chunk: Vec<ContrastivePair> = batch.iter().map(|&i| pairs[i].clone()).collect();
                let lg = contrastive_loss(&*model, &chunk, kind, config.negative_mode)?;
                opt.step(model.params_mut(), &lg.grad);
                total += lg.loss * chunk.len() as f64;
            }
            rep.losses.push(total / pairs.len() as f64);
        }
        if config.report_after {
            let (after, _) = sample_all(&*model, examples, reward, config, it);
            let (mean, unscorable) = mean_scored(after.iter().flatten());
            rep.mean_reward_after = mean;
            rep.unscorable_after = Some(unscorable);
        }
        log::info!(
            "iteration {iteration}: {} pairs, reward {:?} -> {:?}",
            rep.pairs,
            rep.mean_reward_before,
            rep.mean_reward_after
        );
        report.iterations.push(rep);
    }
    Ok(report)
}

/// Online variant: pools are built from each batch of documents alone and
/// each batch contributes one optimizer step. Batches without a usable
/// pair are skipped and counted.
pub fn conseq_train_online<M: Trainable>(
    model: &mut M,
    examples: &[ConseqExample],
    reward: &dyn RewardFunction,
    config: &ConseqConfig,
) -> Result<OnlineReport> {
    config.validate()?;
    if config.batch_size < 2 {
        return Err(Error::InvalidConfig("online batches need at least two documents".into()));
    }
    let docs = check_ids(examples)?;
    let kind = config.variant.loss_kind();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut opt = Optimizer::adam(config.learning_rate);
    let mut report = OnlineReport {
        reward: reward.name().to_string(),
        batches: Vec::new(),
        skipped_batches: 0,
    };
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let mut batch: Vec<ConseqExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
        batch.sort_by(|a, b| a.id.cmp(&b.id));
        let ground_truth = score_ground_truth(&batch, reward);
        let positives = build_positive_pool(&ground_truth, config.p)?;
        let (samples, _) = sample_all(&*model, &batch, reward, config, 0);
        let minima: Vec<ScoredSummary> = samples.iter().filter_map(|s| doc_minimum(s).cloned()).collect();
        let negatives = bottom_pool(&minima, config.p);
        let inter = intersect_pools(&positives, &negatives, &docs)?;
        let mut rep = BatchReport {
            batch: b,
            docs: batch.iter().map(|e| e.id.clone()).collect(),
            positives: positives.len(),
            negatives: negatives.len(),
            pairs: inter.pairs.len(),
            loss: None,
        };
        if inter.pairs.is_empty() {
            report.skipped_batches += 1;
            report.batches.push(rep);
            continue;
        }
        let pairs = terminated(&inter.pairs, model.vocab());
        let lg = contrastive_loss(&*model, &pairs, kind, config.negative_mode)?;
        opt.step(model.params_mut(), &lg.grad);
        rep.loss = Some(lg.loss);
        report.batches.push(rep);
    }
    Ok(report)
}

/// `delta * grad log p(sample | input)`, the ascent direction of one
/// REINFORCE update with reward gap `delta`.
pub fn reinforce_gradient<M: Trainable>(model: &M, input: &TokenSequence, sample: &[TokenId], delta: f64) -> Result<Vec<f64>> {
    let vocab = model.vocab();
    input.validate(vocab)?;
    if sample.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    let mut grad = vec![0.0; model.params().len()];
    model.backward(input.trimmed(vocab), sample, &mut |lps| vec![delta; lps.len()], &mut grad)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            pair_id: String::new(),
            detail: "non-finite REINFORCE gradient".into(),
        });
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceDiagnostics {
    pub doc_id: String,
    pub sample: TokenSequence,
    pub baseline: TokenSequence,
    pub sample_reward: Reward,
    pub baseline_reward: Reward,
    /// `r(sample) - r(baseline)` when both are scored.
    pub reward_gap: Option<f64>,
    /// The sample could not be scored.
    pub degenerate: bool,
    pub skipped: bool,
}

/// One REINFORCE update on a single document: sample, decode the greedy
/// baseline, and move the parameters by `lr * (r(y) - r(b)) grad log p(y|x)`.
/// The step is skipped when either reward is unscorable.
pub fn reinforce_step<M: Trainable>(
    model: &mut M,
    example: &ConseqExample,
    reward: &dyn RewardFunction,
    sampling: &GenerationConfig,
    baseline: &GenerationConfig,
    learning_rate: f64,
) -> Result<ReinforceDiagnostics> {
    let vocab = model.vocab().clone();
    let mut one = sampling.clone();
    one.num_samples = 1;
    let drawn = generate(&*model, &example.document, &one)?;
    let sample = drawn
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidConfig("sampling produced no sequence".into()))?;
    let base = greedy(&*model, &example.document, baseline)?;
    let (s, b) = (strip_eos(&sample.sequence, &vocab), strip_eos(&base.sequence, &vocab));
    let sample_reward = reward.score(&example.document, &s, Some(&example.reference))?;
    let baseline_reward = reward.score(&example.document, &b, Some(&example.reference))?;
    let mut diag = ReinforceDiagnostics {
        doc_id: example.id.clone(),
        sample: s,
        baseline: b,
        sample_reward,
        baseline_reward,
        reward_gap: None,
        degenerate: !sample_reward.is_scored(),
        skipped: true,
    };
    let (Some(rs), Some(rb)) = (sample_reward.value(), baseline_reward.value()) else {
        log::debug!("skipping REINFORCE step on {}: unscorable reward", example.id);
        return Ok(diag);
    };
    diag.reward_gap = Some(rs - rb);
    diag.skipped = false;
    if rs != rb {
        let g = reinforce_gradient(&*model, &example.document, &sample.sequence.ids, rs - rb)?;
        for (p, g) in model.params_mut().iter_mut().zip(&g) {
            *p += learning_rate * g;
        }
    }
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceReport {
    pub steps: usize,
    pub updates: usize,
    /// Steps whose sample was unscorable.
    pub degenerate: usize,
    /// Steps skipped because only the baseline was unscorable.
    pub baseline_unscorable: usize,
    pub mean_reward_gap: Option<f64>,
}

/// Runs `reinforce_step` over every document for `config.epochs` passes.
/// Sampling seeds follow the per-document scheme of the pool builders.
pub fn reinforce_train<M: Trainable>(
    model: &mut M,
    examples: &[ConseqExample],
    reward: &dyn RewardFunction,
    config: &ConseqConfig,
) -> Result<ReinforceReport> {
    config.validate()?;
    check_ids(examples)?;
    let baseline = GenerationConfig::beam(1).with_lengths(config.min_len, config.max_len);
    let mut report = ReinforceReport {
        steps: 0,
        updates: 0,
        degenerate: 0,
        baseline_unscorable: 0,
        mean_reward_gap: None,
    };
    let mut gaps = Vec::new();
    for epoch in 0..config.epochs {
        for ex in examples {
            let sampling = config.sampling(doc_seed(config.seed, epoch as u64, &ex.id));
            let d = reinforce_step(model, ex, reward, &sampling, &baseline, config.learning_rate)?;
            report.steps += 1;
            if d.degenerate {
                report.degenerate += 1;
            } else if d.skipped {
                report.baseline_unscorable += 1;
            } else {
                report.updates += 1;
                gaps.extend(d.reward_gap);
            }
        }
    }
    if !gaps.is_empty() {
        report.mean_reward_gap = Some(gaps.iter().sum::<f64>() / gaps.len() as f64);
    }
    Ok(report)
}
