//! Contrastive fine-tuning towards a sequence-level reward.
//!
//! High-reward reference summaries form the positive pool, the lowest-reward
//! model samples form the negative pool, and documents present in both give
//! contrastive pairs. The loss raises the likelihood of positives and lowers
//! it for negatives. A REINFORCE driver with a greedy baseline is provided
//! for comparison.

mod loss;
mod pools;
mod reward;
mod train;

pub use loss::{contrastive_loss, LossKind, NegativeMode};
pub use pools::{
    build_positive_pool, doc_seed, intersect_pools, rank_desc, read_pool_file, sample_negative_pool, select_count,
    write_pool_file, Intersection, NegativePool, PoolLine,
};
pub use reward::{
    normalize_rewards, FnReward, QualsF1Reward, QualsReward, Reward, RewardFunction, RewardNormalizer, RougeSumReward,
};
pub use train::{
    conseq_train, conseq_train_online, minibatches, reinforce_gradient, reinforce_step, reinforce_train,
    BatchReport, ConseqReport, IterationReport, OnlineReport, ReinforceDiagnostics, ReinforceReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{GenerationConfig, TokenSequence};

/// A document with its reference summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConseqExample {
    pub id: String,
    pub document: TokenSequence,
    pub reference: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    GroundTruth,
    /// Sample `index` of a top-k run seeded with `seed`.
    Sampled { seed: u64, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSummary {
    pub doc_id: String,
    pub summary: TokenSequence,
    pub origin: Origin,
    pub reward: Reward,
}

/// A document with one positive and one negative summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub doc_id: String,
    pub input: TokenSequence,
    pub positive: ScoredSummary,
    pub negative: ScoredSummary,
    /// Positive reward mapped to [0, 1]; weights the positive term.
    pub r_pos: f64,
    /// Negative reward mapped to [0, 1]; the negative term is weighted by
    /// `1 - r_neg`.
    pub r_neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Offline,
    Online,
    Weighted,
    PositiveOnly,
}

impl Variant {
    pub fn loss_kind(self) -> LossKind {
        match self {
            Variant::Offline | Variant::Online => LossKind::Plain,
            Variant::Weighted => LossKind::Weighted,
            Variant::PositiveOnly => LossKind::PositiveOnly,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::from(s))
            .map_err(|_| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConseqConfig {
    /// Percentage of documents kept in each pool, in (0, 100].
    pub p: f64,
    pub negatives_per_doc: usize,
    pub top_k: usize,
    pub outer_iterations: usize,
    pub variant: Variant,
    pub negative_mode: NegativeMode,
    pub learning_rate: f64,
    /// Contrastive pairs per minibatch (offline) or documents per batch
    /// (online).
    pub batch_size: usize,
    pub epochs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Re-sample and score after each iteration to report the mean reward.
    pub report_after: bool,
}

impl Default for ConseqConfig {
    fn default() -> Self {
        ConseqConfig {
            p: 30.0,
            negatives_per_doc: 6,
            top_k: 50,
            outer_iterations: 1,
            variant: Variant::Offline,
            negative_mode: NegativeMode::Token,
            learning_rate: 3e-6,
            batch_size: 8,
            epochs: 1,
            min_len: 10,
            max_len: 60,
            seed: 0,
            report_after: true,
        }
    }
}

impl ConseqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.p > 0.0 && self.p <= 100.0) {
            return bad(format!("p = {} must lie in (0, 100]", self.p));
        }
        if self.negatives_per_doc == 0 || self.top_k == 0 || self.batch_size == 0 {
            return bad("negatives_per_doc, top_k and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.max_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length limits {}..{}", self.min_len, self.max_len));
        }
        Ok(())
    }

    /// Top-k sampling config for one document.
    pub fn sampling(&self, seed: u64) -> GenerationConfig {
        GenerationConfig::topk(self.top_k, self.negatives_per_doc, seed).with_lengths(self.min_len, self.max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ConseqConfig::default().validate().is_ok());
        for c in [
            ConseqConfig { p: 0.0, ..Default::default() },
            ConseqConfig { p: 101.0, ..Default::default() },
            ConseqConfig { negatives_per_doc: 0, ..Default::default() },
            ConseqConfig { min_len: 9, max_len: 3, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
        assert_eq!("positive-only".parse::<Variant>().unwrap(), Variant::PositiveOnly);
        assert!("bogus".parse::<Variant>().is_err());
    }
}
