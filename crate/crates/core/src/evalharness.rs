//! ROUGE, percentile-bin correlation between two metrics, and a one-sided
//! sign test for paired improvements.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

/// ROUGE F-measures (beta = 1, no stemming, no stop-word removal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

impl RougeScores {
    pub fn sum(&self) -> f64 {
        self.r1 + self.r2 + self.rl
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_f(c: &[String], r: &[String], n: usize) -> f64 {
    let grams = |t: &[String]| -> Vec<Vec<String>> { t.windows(n).map(<[String]>::to_vec).collect() };
    let (gc, gr) = (grams(c), grams(r));
    if gc.is_empty() || gr.is_empty() {
        // too short for any n-gram: agreement only if the texts agree
        return if gc.is_empty() && gr.is_empty() && c == r { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    for g in &gr {
        *counts.entry(g.as_slice()).or_default() += 1;
    }
    let mut overlap = 0;
    for g in &gc {
        if let Some(k) = counts.get_mut(g.as_slice()) {
            if *k > 0 {
                *k -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, gc.len(), gr.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge(candidate: &str, reference: &str) -> RougeScores {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        let v = if c.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
        return RougeScores { r1: v, r2: v, rl: v };
    }
    RougeScores {
        r1: ngram_f(&c, &r, 1),
        r2: ngram_f(&c, &r, 2),
        rl: f_measure(lcs_len(&c, &r), c.len(), r.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower_percentile: f64,
    pub upper_percentile: f64,
    pub count: usize,
    pub mean_primary: f64,
    pub mean_partner: f64,
    /// Population standard deviation of the partner scores.
    pub std_partner: f64,
    /// Input indices in sorted order.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub num_bins: usize,
    pub bins: Vec<Bin>,
    pub spearman: f64,
}

impl BinReport {
    /// `percentile,mean,stdev` rows, one per bin, keyed by the upper percentile.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("percentile,mean,stdev\n");
        for b in &self.bins {
            s.push_str(&format!("{},{},{}\n", b.upper_percentile, b.mean_partner, b.std_partner));
        }
        s
    }
}

/// Ranks starting at 1, tied values sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Sorts by `primary` (ties by input index), splits into `num_bins`
/// near-equal bins (the first `n % num_bins` get one extra member) and
/// summarizes `partner` per bin.
pub fn bin_correlation(primary: &[f64], partner: &[f64], num_bins: usize) -> Result<BinReport> {
    if primary.len() != partner.len() {
        return Err(Error::InvalidInput(format!(
            "score lists differ in length ({} vs {})",
            primary.len(),
            partner.len()
        )));
    }
    let n = primary.len();
    if num_bins == 0 || n < num_bins {
        return Err(Error::InvalidInput(format!("cannot split {n} scores into {num_bins} bins")));
    }
    if primary.iter().chain(partner).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| primary[a].total_cmp(&primary[b]).then(a.cmp(&b)));
    let (base, extra) = (n / num_bins, n % num_bins);
    let mut bins = Vec::with_capacity(num_bins);
    let mut start = 0;
    for b in 0..num_bins {
        let len = base + usize::from(b < extra);
        let members = order[start..start + len].to_vec();
        let mean = |v: &[f64]| members.iter().map(|&i| v[i]).sum::<f64>() / len as f64;
        let (mp, mq) = (mean(primary), mean(partner));
        let var = members.iter().map(|&i| (partner[i] - mq).powi(2)).sum::<f64>() / len as f64;
        bins.push(Bin {
            lower_percentile: 100.0 * start as f64 / n as f64,
            upper_percentile: 100.0 * (start + len) as f64 / n as f64,
            count: len,
            mean_primary: mp,
            mean_partner: mq,
            std_partner: var.sqrt(),
            members,
        });
        start += len;
    }
    Ok(BinReport {
        num_bins,
        bins,
        spearman: spearman(primary, partner),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positives: usize,
    pub negatives: usize,
    pub ties: usize,
    /// One-sided `P(X >= positives)` for `X ~ Binomial(positives + negatives, 1/2)`.
    pub p_value: f64,
}

/// One-sided sign test that paired differences tend to be positive.
/// Exact zeros are ties and are discarded.
pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positives = diffs.iter().filter(|&&d| d > 0.0).count();
    let negatives = diffs.iter().filter(|&&d| d < 0.0).count();
    let ties = diffs.len() - positives - negatives;
    let n = (positives + negatives) as u64;
    let p_value = if positives == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n).expect("valid binomial");
        b.sf(positives as u64 - 1)
    };
    SignTest {
        positives,
        negatives,
        ties,
        p_value,
    }
}
