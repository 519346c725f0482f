use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::rouge;
use crate::quals::{quals_f1, quals_score};
use crate::seqmodel::{GenerationConfig, Seq2Seq, TokenSequence, Vocabulary};

/// A reward value; unscorable ranks below every scored value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reward {
    Scored(f64),
    Unscorable,
}

impl Reward {
    pub fn value(self) -> Option<f64> {
        match self {
            Reward::Scored(v) => Some(v),
            Reward::Unscorable => None,
        }
    }

    pub fn is_scored(self) -> bool {
        matches!(self, Reward::Scored(_))
    }

    /// Total order: `Unscorable < Scored(x)`, scored values by `total_cmp`.
    pub fn rank_cmp(&self, other: &Reward) -> Ordering {
        match (self, other) {
            (Reward::Unscorable, Reward::Unscorable) => Ordering::Equal,
            (Reward::Unscorable, _) => Ordering::Less,
            (_, Reward::Unscorable) => Ordering::Greater,
            (Reward::Scored(a), Reward::Scored(b)) => a.total_cmp(b),
        }
    }
}

impl From<Option<f64>> for Reward {
    fn from(v: Option<f64>) -> Self {
        match v {
            Some(x) if x.is_finite() => Reward::Scored(x),
            _ => Reward::Unscorable,
        }
    }
}

/// A deterministic sequence-level reward.
pub trait RewardFunction: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, document: &TokenSequence, summary: &TokenSequence, reference: Option<&TokenSequence>) -> Result<Reward>;
}

/// QUALS of the summary against its document.
pub struct QualsReward<M> {
    pub qagen: M,
    pub config: GenerationConfig,
}

impl<M: Seq2Seq> RewardFunction for QualsReward<M> {
    fn name(&self) -> &str {
        "quals"
    }
    fn score(&self, document: &TokenSequence, summary: &TokenSequence, _: Option<&TokenSequence>) -> Result<Reward> {
        if summary.trimmed(self.qagen.vocab()).is_empty() {
            return Ok(Reward::Unscorable);
        }
        Ok(quals_score(&self.qagen, document, summary, &self.config)?.score.into())
    }
}

/// Mean answer F1 of the summary's questions answered on the document.
pub struct QualsF1Reward<M> {
    pub qagen: M,
    pub config: GenerationConfig,
}

impl<M: Seq2Seq> RewardFunction for QualsF1Reward<M> {
    fn name(&self) -> &str {
        "quals-f1"
    }
    fn score(&self, document: &TokenSequence, summary: &TokenSequence, _: Option<&TokenSequence>) -> Result<Reward> {
        if summary.trimmed(self.qagen.vocab()).is_empty() {
            return Ok(Reward::Unscorable);
        }
        Ok(quals_f1(&self.qagen, document, summary, &self.config)?.score.into())
    }
}

/// ROUGE-1 + ROUGE-2 + ROUGE-L against the reference (the document when no
/// reference is given).
pub struct RougeSumReward {
    pub vocab: Vocabulary,
}

impl RewardFunction for RougeSumReward {
    fn name(&self) -> &str {
        "rouge-sum"
    }
    fn score(&self, document: &TokenSequence, summary: &TokenSequence, reference: Option<&TokenSequence>) -> Result<Reward> {
        let target = reference.unwrap_or(document);
        let r = rouge(&self.vocab.decode(&summary.ids), &self.vocab.decode(&target.ids));
        Ok(Reward::Scored(r.sum()))
    }
}

/// Wraps a closure; used for injected or adversarial rewards.
pub struct FnReward<F> {
    pub name: String,
    pub f: F,
}

impl<F> RewardFunction for FnReward<F>
where
    F: Fn(&TokenSequence, &TokenSequence, Option<&TokenSequence>) -> Result<Reward> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn score(&self, document: &TokenSequence, summary: &TokenSequence, reference: Option<&TokenSequence>) -> Result<Reward> {
        (self.f)(document, summary, reference)
    }
}

/// Affine map of a fitted `[min, max]` onto `[0, 1]`, clamped outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub min: f64,
    pub max: f64,
}

impl RewardNormalizer {
    /// Fits on the finite values of `scores`.
    pub fn fit(scores: &[f64]) -> Result<Self> {
        let finite: Vec<f64> = scores.iter().copied().filter(|x| x.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::InvalidInput("no finite scores to normalize".into()));
        }
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            log::warn!("all rewards equal ({min}); normalized rewards are 0.5");
        }
        Ok(RewardNormalizer { min, max })
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.min == self.max {
            return 0.5;
        }
        ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    /// Unscorable maps to 0, the bottom of the scale.
    pub fn apply_reward(&self, r: Reward) -> f64 {
        r.value().map_or(0.0, |x| self.apply(x))
    }
}

pub fn normalize_rewards(scores: &[f64]) -> Result<Vec<f64>> {
    let n = RewardNormalizer::fit(scores)?;
    Ok(scores.iter().map(|&x| n.apply(x)).collect())
}
