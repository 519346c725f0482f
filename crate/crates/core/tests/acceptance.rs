//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --test acceptance`.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use quals_conseq::conseq::*;
use quals_conseq::corpuskit::{generate_corpus, CorpusExample, CorruptionSpec};
use quals_conseq::evalharness::{bin_correlation, rouge, sign_test, spearman, RougeScores};
use quals_conseq::qagen::ContextQaGen;
use quals_conseq::qagsref::{qags_score, token_f1, QagsComponents};
use quals_conseq::quals::quals_score;
use quals_conseq::seqmodel::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn small_vocab() -> Vocabulary {
    Vocabulary::with_specials(["a", "b", "c", "d"].map(String::from)).unwrap()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn random_words(vocab: &Vocabulary, seed: u64, len: usize) -> TokenSequence {
    let words: Vec<TokenId> = (0..vocab.len() as TokenId).filter(|&t| !vocab.is_special(t)).collect();
    TokenSequence::new((0..len).map(|i| words[(splitmix(seed ^ (i as u64) << 20) % words.len() as u64) as usize]).collect())
}

// ---------------------------------------------------------------- 1

fn c1_quals_identity() -> Outcome {
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    let mut seed = 0u64;
    while cases < 200 && seed < 2000 {
        let spec = CorruptionSpec {
            seed,
            doc_facts: (2, 5),
            summary_facts: (1, 2),
            ..Default::default()
        };
        let corpus = generate_corpus(&spec, 1).map_err(err)?;
        let qlen = 1 + (seed % 3) as usize;
        let eps = [0.01, 0.05, 0.2][(seed % 3) as usize];
        let qa = ContextQaGen::new(corpus.vocab.clone(), qlen, eps, &["."]).map_err(err)?;
        let text = if seed % 2 == 0 { &corpus.clean[0].document } else { &corpus.clean[0].summary };
        let s = corpus.vocab.encode(text).map_err(err)?;
        let cfg = GenerationConfig::diverse_beam(2 + (seed % 6) as usize, 0.5).with_lengths(0, qlen + 3);
        let r = quals_score(&qa, &s, &s, &cfg).map_err(err)?;
        seed += 1;
        if r.m == 0 {
            continue;
        }
        cases += 1;
        worst = worst.max(r.score.unwrap().abs());
    }
    ensure(cases == 200, format!("only {cases} scorable cases"))?;
    ensure(worst < 1e-9, format!("max |score| = {worst:e}"))?;
    Ok(format!("{cases} cases, max |score| = {worst:e}"))
}

// ---------------------------------------------------------------- 2

/// Group-by-group decoding: group `g` runs to completion against the
/// per-step tokens already chosen by groups `0..g`.
fn oracle_diverse_beam(
    m: &TableModel,
    input: &[TokenId],
    groups: usize,
    lambda: f64,
    min_len: usize,
    max_len: usize,
) -> Vec<(Vec<TokenId>, Vec<f64>)> {
    let v = m.vocab();
    let eos = v.eos();
    let mut used: Vec<Vec<TokenId>> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..groups {
        let (mut ids, mut lps) = (Vec::<TokenId>::new(), Vec::new());
        let mut step = 0;
        while ids.iter().filter(|&&t| t != eos).count() < max_len && ids.last() != Some(&eos) {
            let row = m.next_token_logprobs(input, &ids).unwrap();
            let mut best: Option<(f64, f64, TokenId)> = None;
            let mut any = false;
            for t in 0..v.len() as TokenId {
                let lp = row[t as usize];
                if !lp.is_finite() || !v.is_emittable(t) || (t == eos && ids.len() < min_len) {
                    continue;
                }
                any = true;
                let seen = used.iter().filter(|u| u.get(step) == Some(&t)).count();
                let score = lp - lambda * seen as f64;
                let better = match best {
                    None => true,
                    Some((bs, bl, bt)) => score > bs || (score == bs && (lp > bl || (lp == bl && t < bt))),
                };
                if better {
                    best = Some((score, lp, t));
                }
            }
            if !any {
                best = Some((0.0, row[eos as usize], eos));
            }
            let (_, lp, t) = best.unwrap();
            ids.push(t);
            lps.push(lp);
            step += 1;
        }
        used.push(ids.clone());
        out.push((ids, lps));
    }
    out
}

fn oracle_ll(m: &TableModel, ctx: &[TokenId], q: &[TokenId], a: &[TokenId]) -> f64 {
    let sep = m.vocab().sep();
    let seq: Vec<TokenId> = q.iter().copied().chain([sep]).chain(a.iter().copied()).collect();
    let mut total = 0.0;
    for i in 0..seq.len() {
        if i != q.len() {
            total += m.next_token_logprobs(ctx, &seq[..i]).unwrap()[seq[i] as usize];
        }
    }
    total / (q.len() + a.len()) as f64
}

fn oracle_quals(m: &TableModel, doc: &TokenSequence, summ: &TokenSequence, g: usize, lambda: f64, max_len: usize) -> Option<f64> {
    let v = m.vocab();
    let (eos, sep) = (v.eos(), v.sep());
    let norm = |t: &str| {
        let words: Vec<String> = t
            .split(' ')
            .map(|w| w.chars().skip_while(|c| !c.is_alphanumeric()).collect::<String>())
            .map(|w| w.trim_end_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        words.join(" ")
    };
    let summary_text = norm(&v.decode(&summ.ids));
    // answer text -> (ll, question, answer)
    let mut best: HashMap<String, (f64, Vec<TokenId>, Vec<TokenId>)> = HashMap::new();
    for (mut ids, lps) in oracle_diverse_beam(m, &summ.ids, g, lambda, 0, max_len) {
        if ids.last() == Some(&eos) {
            ids.pop();
        }
        let Some(s) = ids.iter().position(|&t| t == sep) else { continue };
        let (q, a) = (ids[..s].to_vec(), ids[s + 1..].to_vec());
        if q.is_empty() || a.is_empty() || ids.contains(&eos) {
            continue;
        }
        let ans = norm(&v.decode(&a));
        if ans.is_empty() || !summary_text.contains(&ans) {
            continue;
        }
        let ll = (lps[..s].iter().sum::<f64>() + lps[s + 1..].iter().sum::<f64>()) / (q.len() + a.len()) as f64;
        let replace = match best.get(&ans) {
            None => true,
            Some((bl, bq, _)) => ll > *bl || (ll == *bl && (q.len() < bq.len() || (q.len() == bq.len() && q < *bq))),
        };
        if replace {
            best.insert(ans, (ll, q, a));
        }
    }
    if best.is_empty() {
        return None;
    }
    let total: f64 = best
        .values()
        .map(|(_, q, a)| oracle_ll(m, &doc.ids, q, a) - oracle_ll(m, &summ.ids, q, a))
        .sum();
    Some(total / best.len() as f64)
}

fn c2_pipeline_vs_oracle() -> Outcome {
    let v = small_vocab();
    let (mut compared, mut scorable) = (0, 0);
    let mut worst: f64 = 0.0;
    for case in 0..2000u64 {
        if scorable == 60 {
            break;
        }
        let m = TableModel::new(v.clone(), 1000 + case);
        let summ = random_words(&v, case * 7 + 1, 3 + (case % 3) as usize);
        let doc = random_words(&v, case * 7 + 2, 6 + (case % 3) as usize);
        let g = 2 + (case % 5) as usize;
        let lambda = [0.0, 0.5, 1.0, 2.0][(case % 4) as usize];
        let max_len = 4 + (case % 3) as usize;
        let cfg = GenerationConfig::diverse_beam(g, lambda).with_lengths(0, max_len);
        let got = quals_score(&m, &doc, &summ, &cfg).map_err(err)?;
        let want = oracle_quals(&m, &doc, &summ, g, lambda, max_len);
        compared += 1;
        match (got.score, want) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                scorable += 1;
                worst = worst.max((a - b).abs());
            }
            (a, b) => return Err(format!("case {case}: pipeline {a:?} vs oracle {b:?}")),
        }
    }
    ensure(scorable >= 50, format!("only {scorable} scorable cases"))?;
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("{compared} cases ({scorable} scorable), max deviation {worst:e}"))
}

// ---------------------------------------------------------------- 3

fn grad_model() -> PointerRnn {
    let v = Vocabulary::with_specials(["a", "b", "c", "d", "e"].map(String::from)).unwrap();
    let cfg = PointerRnnConfig {
        dim: 4,
        max_input_len: 5,
        max_output_len: 5,
        copy: true,
        init_scale: 0.4,
    };
    PointerRnn::new(cfg, v, 21).unwrap()
}

fn summary(id: &str, ids: Vec<TokenId>, r: f64) -> ScoredSummary {
    ScoredSummary {
        doc_id: id.into(),
        summary: TokenSequence::new(ids),
        origin: Origin::GroundTruth,
        reward: Reward::Scored(r),
    }
}

/// Largest relative error between `analytic` and a fourth-order central
/// difference of `f`.
fn fd_check(m: &mut PointerRnn, analytic: &[f64], f: &dyn Fn(&PointerRnn) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..m.params().len() {
        let orig = m.params()[i];
        let mut at = |d: f64| {
            m.params_mut()[i] = orig + d;
            f(m)
        };
        let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        m.params_mut()[i] = orig;
        let scale = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / scale);
    }
    worst
}

fn c3_gradients() -> Outcome {
    let mut m = grad_model();
    let eos = m.vocab().eos();
    let pairs = vec![
        ContrastivePair {
            doc_id: "x".into(),
            input: TokenSequence::new(vec![4, 5, 6, 7]),
            positive: summary("x", vec![5, 6, eos], 0.9),
            negative: summary("x", vec![8, 4, eos], 0.2),
            r_pos: 0.9,
            r_neg: 0.2,
        },
        ContrastivePair {
            doc_id: "y".into(),
            input: TokenSequence::new(vec![8, 7]),
            positive: summary("y", vec![7, eos], 0.6),
            negative: summary("y", vec![4, 4, 5, eos], 0.1),
            r_pos: 0.6,
            r_neg: 0.1,
        },
    ];
    let mut report = Vec::new();
    for kind in [LossKind::Plain, LossKind::Weighted, LossKind::PositiveOnly] {
        for mode in [NegativeMode::Token, NegativeMode::Sequence] {
            let g = contrastive_loss(&m, &pairs, kind, mode).map_err(err)?.grad;
            let worst = fd_check(&mut m, &g, &|m| contrastive_loss(m, &pairs, kind, mode).unwrap().loss);
            ensure(worst < 1e-4, format!("{kind:?}/{mode:?}: relative error {worst:e}"))?;
            report.push(worst);
        }
    }
    let x = TokenSequence::new(vec![4, 6, 8]);
    let y = vec![6, 5, eos];
    let delta = 0.7;
    let g = reinforce_gradient(&m, &x, &y, delta).map_err(err)?;
    let worst = fd_check(&mut m, &g, &|m| delta * m.sequence_logprobs(&x.ids, &y).unwrap().iter().sum::<f64>());
    ensure(worst < 1e-4, format!("REINFORCE: relative error {worst:e}"))?;
    report.push(worst);

    // r(sample) = 1, r(baseline) = 0: the update is exactly lr * grad log p
    let ex = ConseqExample {
        id: "r".into(),
        document: x.clone(),
        reference: x.clone(),
    };
    let sampling = GenerationConfig::topk(5, 1, 3).with_lengths(1, 4);
    let baseline = GenerationConfig::beam(1).with_lengths(1, 4);
    let sample = generate(&m, &x, &sampling).map_err(err)?.remove(0).sequence;
    let greedy_out = greedy(&m, &x, &baseline).map_err(err)?.sequence;
    ensure(sample != greedy_out, "sample coincides with the baseline")?;
    let strip = |s: &TokenSequence| {
        let mut ids = s.ids.clone();
        if ids.last() == Some(&eos) {
            ids.pop();
        }
        ids
    };
    let target = strip(&sample);
    let indicator = FnReward {
        name: "indicator".into(),
        f: move |_: &TokenSequence, s: &TokenSequence, _: Option<&TokenSequence>| {
            Ok(Reward::Scored(if s.ids == target { 1.0 } else { 0.0 }))
        },
    };
    let before = m.params().to_vec();
    let unit = reinforce_gradient(&m, &x, &sample.ids, 1.0).map_err(err)?;
    let lr = 0.05;
    let d = reinforce_step(&mut m, &ex, &indicator, &sampling, &baseline, lr).map_err(err)?;
    ensure(d.reward_gap == Some(1.0), format!("reward gap {:?}", d.reward_gap))?;
    let mut dev: f64 = 0.0;
    for i in 0..before.len() {
        let step = m.params()[i] - before[i];
        dev = dev.max((step - lr * unit[i]).abs() / (lr * unit[i]).abs().max(1e-12));
    }
    ensure(dev < 1e-6, format!("REINFORCE update deviates by {dev:e}"))?;
    let worst = report.iter().copied().fold(0.0, f64::max);
    Ok(format!("6 loss configurations + REINFORCE, max relative error {worst:e}; update vs lr*grad {dev:e}"))
}

// ---------------------------------------------------------------- 4

fn injected_reward() -> FnReward<impl Fn(&TokenSequence, &TokenSequence, Option<&TokenSequence>) -> quals_conseq::Result<Reward> + Send + Sync> {
    FnReward {
        name: "injected".into(),
        f: |d: &TokenSequence, s: &TokenSequence, _: Option<&TokenSequence>| {
            let h = d.ids.iter().chain(&[u32::MAX]).chain(&s.ids).fold(7u64, |h, &t| splitmix(h ^ t as u64));
            Ok(if h % 9 == 0 { Reward::Unscorable } else { Reward::Scored((h % 5) as f64 / 4.0 - 0.5) })
        },
    }
}

/// Brute-force pools and pairs, written directly from the selection rules.
fn reference_pairs(model: &TableModel, docs: &[ConseqExample], reward: &dyn RewardFunction, c: &ConseqConfig) -> Vec<(String, Vec<TokenId>, Vec<TokenId>, f64, f64)> {
    let val = |r: Reward| r.value().unwrap_or(f64::NEG_INFINITY);
    let key = |r: Reward| if r.is_scored() { (1, val(r)) } else { (0, 0.0) };
    let cmp = |a: Reward, b: Reward| key(a).partial_cmp(&key(b)).unwrap();
    let take = |n: usize| (((c.p * n as f64) / 100.0 - 1e-9).ceil() as usize).clamp(1, n);
    let mut gt: Vec<(String, Reward, Vec<TokenId>)> = docs
        .iter()
        .map(|d| (d.id.clone(), reward.score(&d.document, &d.reference, None).unwrap(), d.reference.ids.clone()))
        .collect();
    gt.sort_by(|a, b| cmp(b.1, a.1).then(a.0.cmp(&b.0)));
    gt.truncate(take(docs.len()));
    let mut mins: Vec<(String, Reward, Vec<TokenId>)> = Vec::new();
    for d in docs {
        let cfg = GenerationConfig::topk(c.top_k, c.negatives_per_doc, doc_seed(c.seed, 0, &d.id)).with_lengths(c.min_len, c.max_len);
        let mut worst: Option<(Reward, Vec<TokenId>)> = None;
        for s in generate(model, &d.document, &cfg).unwrap() {
            let mut ids = s.sequence.ids;
            if ids.last() == Some(&model.vocab().eos()) {
                ids.pop();
            }
            let r = reward.score(&d.document, &TokenSequence::new(ids.clone()), None).unwrap();
            if worst.as_ref().map_or(true, |(w, _)| cmp(r, *w) == Ordering::Less) {
                worst = Some((r, ids));
            }
        }
        let (r, ids) = worst.unwrap();
        mins.push((d.id.clone(), r, ids));
    }
    mins.sort_by(|a, b| cmp(a.1, b.1).then(a.0.cmp(&b.0)));
    mins.truncate(take(docs.len()));
    let vals: Vec<f64> = gt.iter().chain(&mins).filter_map(|x| x.1.value()).collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let norm = |r: Reward| match r.value() {
        None => 0.0,
        Some(_) if lo == hi => 0.5,
        Some(x) => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
    };
    let mut out = Vec::new();
    for (id, rp, pos) in &gt {
        if let Some((_, rn, neg)) = mins.iter().find(|m| &m.0 == id) {
            if rp.is_scored() && cmp(*rp, *rn) != Ordering::Less {
                out.push((id.clone(), pos.clone(), neg.clone(), norm(*rp), norm(*rn)));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn c4_set_construction() -> Outcome {
    let v = Vocabulary::with_specials(["a", "b", "c", "d", "e", "f"].map(String::from)).unwrap();
    let model = TableModel::new(v.clone(), 77);
    let docs: Vec<ConseqExample> = (0..100)
        .map(|i| ConseqExample {
            id: format!("doc{:03}", (i * 37) % 100),
            document: random_words(&v, 500 + i, 5),
            reference: random_words(&v, 900 + i, 3),
        })
        .collect();
    let reward = injected_reward();
    let mut rows = Vec::new();
    for p in [30.0, 50.0, 90.0] {
        let cfg = ConseqConfig {
            p,
            negatives_per_doc: 4,
            top_k: 3,
            min_len: 1,
            max_len: 4,
            seed: 13,
            ..Default::default()
        };
        let gt: Vec<ScoredSummary> = docs
            .iter()
            .map(|d| ScoredSummary {
                doc_id: d.id.clone(),
                summary: d.reference.clone(),
                origin: Origin::GroundTruth,
                reward: reward.score(&d.document, &d.reference, None).unwrap(),
            })
            .collect();
        let pos = build_positive_pool(&gt, p).map_err(err)?;
        let neg = sample_negative_pool(&model, &docs, &reward, &cfg, 0).map_err(err)?;
        let map: HashMap<String, TokenSequence> = docs.iter().map(|d| (d.id.clone(), d.document.clone())).collect();
        let inter = intersect_pools(&pos, &neg.pool, &map).map_err(err)?;
        let got: Vec<_> = inter
            .pairs
            .iter()
            .map(|x| (x.doc_id.clone(), x.positive.summary.ids.clone(), x.negative.summary.ids.clone(), x.r_pos, x.r_neg))
            .collect();
        let want = reference_pairs(&model, &docs, &reward, &cfg);
        ensure(got == want, format!("p = {p}: {} pairs vs reference {}", got.len(), want.len()))?;
        let ids_pos: HashSet<_> = inter.pairs.iter().map(|x| &x.positive.doc_id).collect();
        let ids_neg: HashSet<_> = inter.pairs.iter().map(|x| &x.negative.doc_id).collect();
        ensure(ids_pos == ids_neg, "pool doc-id sets differ")?;
        let ties = gt.iter().filter(|s| s.reward.is_scored()).count() - {
            let mut u: Vec<f64> = gt.iter().filter_map(|s| s.reward.value()).collect();
            u.sort_by(f64::total_cmp);
            u.dedup();
            u.len()
        };
        let unscorable = gt.iter().filter(|s| !s.reward.is_scored()).count() + neg.minima.iter().filter(|s| !s.reward.is_scored()).count();
        rows.push(format!("p={p}: {} pairs ({ties} tied, {unscorable} unscorable)", got.len()));
    }
    Ok(rows.join("; "))
}

// ---------------------------------------------------------------- 5

fn c5_decoding() -> Outcome {
    let v = Vocabulary::with_specials(["a", "b", "c", "d", "e", "f", "g", "h"].map(String::from)).unwrap();
    for case in 0..100u64 {
        let m = TableModel::new(v.clone(), case);
        let x = random_words(&v, case, 4);
        let w = 1 + (case % 5) as usize;
        let (lo, hi) = ((case % 3) as usize, 3 + (case % 4) as usize);
        let mut dbs = GenerationConfig::diverse_beam(1, 0.0).with_lengths(lo, hi);
        dbs.beam_width = w;
        let a = generate(&m, &x, &dbs).map_err(err)?;
        let b = generate(&m, &x, &GenerationConfig::beam(w).with_lengths(lo, hi)).map_err(err)?;
        let bits = |s: &[ScoredSequence]| s.iter().map(|s| (s.sequence.ids.clone(), s.per_token_logprobs.iter().map(|l| l.to_bits()).collect::<Vec<_>>())).collect::<Vec<_>>();
        ensure(bits(&a) == bits(&b), format!("case {case}: diverse beam G=1 differs from beam"))?;
        let s = generate(&m, &x, &GenerationConfig::topk(1, 3, case).with_lengths(lo, hi)).map_err(err)?;
        let g = greedy(&m, &x, &GenerationConfig::beam(1).with_lengths(lo, hi)).map_err(err)?;
        ensure(s.iter().all(|s| s.sequence.ids == g.sequence.ids), format!("case {case}: top-1 differs from greedy"))?;
    }
    let k = 3;
    let mut steps = 0;
    let mut case = 0u64;
    while steps < 10_000 {
        let m = TableModel::new(v.clone(), 10_000 + case);
        let x = random_words(&v, case, 4);
        let cfg = GenerationConfig::topk(k, 10, case).with_lengths(0, 8);
        for s in generate(&m, &x, &cfg).map_err(err)? {
            for t in 0..s.sequence.ids.len() {
                let row = m.next_token_logprobs(&x.ids, &s.sequence.ids[..t]).unwrap();
                let tok = s.sequence.ids[t];
                let better = (0..v.len()).filter(|&u| v.is_emittable(u as TokenId) && (row[u] > row[tok as usize] || (row[u] == row[tok as usize] && (u as TokenId) < tok))).count();
                ensure(better < k, format!("token {tok} ranked {better} at step {t}"))?;
                steps += 1;
            }
        }
        case += 1;
    }
    Ok(format!("100 beam cases bit-exact, 100 top-1 cases equal greedy, {steps} sampled steps inside top-{k}"))
}

// ---------------------------------------------------------------- 6 and 7

struct Experiment {
    vocab: Vocabulary,
    train: Vec<ConseqExample>,
    held_out: Vec<ConseqExample>,
    held_corrupted: Vec<CorpusExample>,
    mle: PointerRnn,
    reward: QualsReward<ContextQaGen>,
}

const EVAL_SAMPLES: usize = 8;

fn setup_experiment() -> Result<Experiment, String> {
    let spec = CorruptionSpec {
        seed: 1,
        rate: 0.3,
        ..Default::default()
    };
    let train = generate_corpus(&spec, 500).map_err(err)?;
    let held = generate_corpus(&CorruptionSpec { seed: 2, ..spec }, 300).map_err(err)?;
    let vocab = train.vocab.clone();
    let conv = |c: &[CorpusExample]| c.iter().map(|e| e.to_conseq(&vocab)).collect::<quals_conseq::Result<Vec<_>>>();
    let train_ex = conv(&train.corrupted).map_err(err)?;
    let held_ex = conv(&held.clean).map_err(err)?;
    let cfg = PointerRnnConfig {
        dim: 16,
        max_input_len: 20,
        max_output_len: 8,
        copy: true,
        init_scale: 0.1,
    };
    let mut mle = PointerRnn::new(cfg, vocab.clone(), 0).map_err(err)?;
    let data: Vec<_> = train_ex.iter().map(|e| (e.document.clone(), e.reference.clone())).collect();
    mle_fit(&mut mle, &mut Optimizer::adam(0.01), &data, 40, 16, 0).map_err(err)?;
    let qa = ContextQaGen::new(vocab.clone(), 2, 0.05, &["."]).map_err(err)?;
    Ok(Experiment {
        vocab,
        train: train_ex,
        held_out: held_ex,
        held_corrupted: held.corrupted,
        mle,
        reward: QualsReward {
            qagen: qa,
            config: GenerationConfig::diverse_beam(6, 0.5).with_lengths(0, 5),
        },
    })
}

/// Per-document mean QUALS over pinned-seed top-k samples; `None` when no
/// sample is scorable.
fn held_out_quals(model: &PointerRnn, e: &Experiment) -> Vec<Option<f64>> {
    let eos = e.vocab.eos();
    e.held_out
        .par_iter()
        .map(|ex| {
            let cfg = GenerationConfig::topk(50, EVAL_SAMPLES, doc_seed(99, 0, &ex.id)).with_lengths(1, 6);
            let scores: Vec<f64> = generate(model, &ex.document, &cfg)
                .unwrap()
                .into_iter()
                .filter_map(|s| {
                    let mut ids = s.sequence.ids;
                    if ids.last() == Some(&eos) {
                        ids.pop();
                    }
                    e.reward.score(&ex.document, &TokenSequence::new(ids), None).unwrap().value()
                })
                .collect();
            (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn run_conseq(e: &Experiment, mode: NegativeMode) -> Result<(PointerRnn, ConseqReport), String> {
    let mut m = e.mle.clone();
    let cfg = ConseqConfig {
        p: 30.0,
        negatives_per_doc: 6,
        top_k: 50,
        outer_iterations: 1,
        learning_rate: 0.001,
        batch_size: 16,
        epochs: 5,
        min_len: 1,
        max_len: 6,
        seed: 5,
        negative_mode: mode,
        report_after: false,
        ..Default::default()
    };
    let rep = conseq_train(&mut m, &e.train, &e.reward, &cfg).map_err(err)?;
    Ok((m, rep))
}

fn compare(before: &[Option<f64>], after: &[Option<f64>]) -> (f64, f64, usize, quals_conseq::evalharness::SignTest) {
    let diffs: Vec<f64> = before.iter().zip(after).filter_map(|(a, b)| Some((*b)? - (*a)?)).collect();
    let mb = mean(before.iter().flatten().copied());
    let ma = mean(after.iter().flatten().copied());
    (mb, ma, diffs.len(), sign_test(&diffs))
}

fn c6_conseq_experiment(e: &Experiment) -> Outcome {
    let before = held_out_quals(&e.mle, e);
    let (trained, rep) = run_conseq(e, NegativeMode::Sequence)?;
    let it = &rep.iterations[0];
    ensure(it.aborted.is_none(), format!("iteration aborted: {:?}", it.aborted))?;
    let after = held_out_quals(&trained, e);
    let (mb, ma, n, t) = compare(&before, &after);

    let (tok_model, _) = run_conseq(e, NegativeMode::Token)?;
    let (_, ta, _, tt) = compare(&before, &held_out_quals(&tok_model, e));
    println!(
        "     info: token-level negative term on the same run: mean {mb:.4} -> {ta:.4}, sign test +{} / -{} p = {:.3e}",
        tt.positives, tt.negatives, tt.p_value
    );

    ensure(n >= 200, format!("only {n} held-out documents scorable before and after"))?;
    let detail = format!(
        "sequence-level negatives, {} pairs; held-out mean QUALS {mb:.4} -> {ma:.4} over {n} docs, sign test +{} / -{} (ties {}), p = {:.3e}",
        it.pairs, t.positives, t.negatives, t.ties, t.p_value
    );
    ensure(ma > mb && t.p_value < 0.05, detail.clone())?;
    Ok(detail)
}

fn c7_correlation(e: &Experiment) -> Outcome {
    let r = bin_correlation(&(1..=10).map(f64::from).collect::<Vec<_>>(), &(1..=10).map(f64::from).collect::<Vec<_>>(), 2).map_err(err)?;
    ensure(r.bins[0].mean_partner == 3.0 && r.bins[1].mean_partner == 8.0, "bin means on 1..10")?;
    ensure((r.spearman - 1.0).abs() < 1e-12, "spearman on identical lists")?;
    let primary = [0.3, -1.0, 2.5, 0.0, 1.1, -0.4];
    let partner = [6.0, 1.0, 4.0, 2.0, 9.0, 3.0];
    // sorted by primary: -1.0, -0.4, 0.0 | 0.3, 1.1, 2.5 -> partner 1, 3, 2 | 6, 9, 4
    let r = bin_correlation(&primary, &partner, 2).map_err(err)?;
    ensure(r.bins[0].mean_partner == 2.0 && r.bins[1].mean_partner == 19.0 / 3.0, "hand fixture bin means")?;
    let r = bin_correlation(&primary, &partner, 3).map_err(err)?;
    let means: Vec<f64> = r.bins.iter().map(|b| b.mean_partner).collect();
    ensure(means == vec![2.0, 4.0, 6.5], format!("three-bin means {means:?}"))?;

    // summaries of mixed faithfulness: held-out references (30% corrupted)
    // and one MLE sample per document
    let qa_model = ContextQaGen::new(e.vocab.clone(), 2, 0.05, &["."]).map_err(err)?;
    let comps = QagsComponents::toy(&e.vocab, qa_model, &["."]).map_err(err)?;
    let eos = e.vocab.eos();
    let mut items: Vec<(TokenSequence, TokenSequence)> = Vec::new();
    for (ex, c) in e.held_out.iter().zip(&e.held_corrupted) {
        items.push((ex.document.clone(), e.vocab.encode(&c.summary).map_err(err)?));
        let s = generate(&e.mle, &ex.document, &GenerationConfig::topk(50, 1, doc_seed(7, 0, &ex.id)).with_lengths(1, 6)).map_err(err)?;
        let mut ids = s[0].sequence.ids.clone();
        if ids.last() == Some(&eos) {
            ids.pop();
        }
        items.push((ex.document.clone(), TokenSequence::new(ids)));
    }
    let scored: Vec<(f64, f64)> = items
        .par_iter()
        .filter_map(|(d, s)| {
            let q = e.reward.score(d, s, None).ok()?.value()?;
            let g = qags_score(&e.vocab.decode(&d.ids), &e.vocab.decode(&s.ids), &comps).ok()?.score?;
            Some((q, g))
        })
        .collect();
    let (q, g): (Vec<f64>, Vec<f64>) = scored.into_iter().unzip();
    let rho = spearman(&q, &g);
    let bins = bin_correlation(&q, &g, 5).map_err(err)?;
    let trend: Vec<String> = bins.bins.iter().map(|b| format!("{:.2}", b.mean_partner)).collect();
    let detail = format!("fixtures exact; QUALS vs toy QAGS on {} summaries: Spearman {rho:.3}, QAGS by QUALS quintile [{}]", q.len(), trend.join(", "));
    ensure(rho > 0.3, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn c8_reinforce_degeneracy() -> Outcome {
    let mut m = grad_model();
    let docs: Vec<ConseqExample> = (0..40)
        .map(|i| {
            let d = random_words(m.vocab(), 300 + i, 4);
            ConseqExample {
                id: format!("r{i:02}"),
                reference: d.clone(),
                document: d,
            }
        })
        .collect();
    // unscorable whenever the summary has an odd number of tokens
    let adversarial = FnReward {
        name: "adversarial".into(),
        f: |d: &TokenSequence, s: &TokenSequence, _: Option<&TokenSequence>| {
            if s.ids.len() % 2 == 1 {
                return Ok(Reward::Unscorable);
            }
            Ok(Reward::Scored(s.ids.iter().filter(|t| d.ids.contains(t)).count() as f64))
        },
    };
    let sampling = |i: u64| GenerationConfig::topk(5, 1, i).with_lengths(1, 4);
    let baseline = GenerationConfig::beam(1).with_lengths(2, 2);
    let (mut degenerate, mut updates) = (0, 0);
    for (i, ex) in docs.iter().enumerate() {
        let before = m.params().to_vec();
        let d = reinforce_step(&mut m, ex, &adversarial, &sampling(i as u64), &baseline, 0.1).map_err(err)?;
        let odd = d.sample.ids.len() % 2 == 1;
        ensure(d.degenerate == odd, format!("doc {}: flag {} for a {}-token sample", ex.id, d.degenerate, d.sample.ids.len()))?;
        if d.skipped {
            ensure(m.params() == &before[..], "skipped step changed parameters")?;
        }
        degenerate += usize::from(d.degenerate);
        updates += usize::from(!d.skipped);
    }
    ensure(degenerate > 0 && updates > 0, format!("{degenerate} degenerate, {updates} updates"))?;
    let cfg = ConseqConfig {
        top_k: 5,
        min_len: 1,
        max_len: 4,
        epochs: 2,
        learning_rate: 0.05,
        ..Default::default()
    };
    let rep = reinforce_train(&mut m, &docs, &adversarial, &cfg).map_err(err)?;
    ensure(rep.steps == 80 && rep.degenerate > 0, format!("driver report {rep:?}"))?;
    ensure(rep.steps == rep.updates + rep.degenerate + rep.baseline_unscorable, "driver counters do not add up")?;
    Ok(format!(
        "single steps: {degenerate}/40 flagged and skipped, {updates} updates; driver: {} steps, {} degenerate, {} updates",
        rep.steps, rep.degenerate, rep.updates
    ))
}

// ---------------------------------------------------------------- 9

fn c9_rouge_f1_and_rc() -> Outcome {
    ensure(rouge("a b c", "a b c") == RougeScores { r1: 1.0, r2: 1.0, rl: 1.0 }, "identity")?;
    let r = rouge("a b c d", "a b x d");
    ensure((r.r1 - 0.75).abs() < 1e-15 && (r.rl - 0.75).abs() < 1e-15 && (r.r2 - 1.0 / 3.0).abs() < 1e-15, format!("{r:?}"))?;
    ensure(rouge("a b", "c d") == RougeScores { r1: 0.0, r2: 0.0, rl: 0.0 }, "disjoint")?;
    ensure(rouge("A b  ", "a B") == rouge("a b", "a b"), "case and whitespace")?;
    ensure(token_f1("the cat sat", "the cat sat") == 1.0, "f1 identity")?;
    ensure(token_f1("alpha beta", "gamma delta") == 0.0, "f1 disjoint")?;
    ensure((token_f1("the cat", "the cat sat") - 0.8).abs() < 1e-15, "f1 partial")?;

    let spec = CorruptionSpec {
        seed: 4,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec, 50).map_err(err)?;
    let vocab = corpus.vocab.clone();
    let docs: Vec<ConseqExample> = corpus.corrupted.iter().map(|c| c.to_conseq(&vocab)).collect::<Result<_, _>>().map_err(err)?;
    let cfg = PointerRnnConfig {
        dim: 8,
        max_input_len: 20,
        max_output_len: 8,
        ..Default::default()
    };
    let mut m = PointerRnn::new(cfg, vocab.clone(), 3).map_err(err)?;
    let rc = RougeSumReward { vocab: vocab.clone() };
    let conf = ConseqConfig {
        p: 50.0,
        min_len: 1,
        max_len: 6,
        learning_rate: 0.001,
        ..Default::default()
    };
    let rep = conseq_train(&mut m, &docs, &rc, &conf).map_err(err)?;
    let it = &rep.iterations[0];
    ensure(it.aborted.is_none() && it.pairs > 0, format!("R-C run: {it:?}"))?;
    Ok(format!(
        "fixtures exact; R-C: 50 docs, {} positives, {} negatives, {} pairs, loss {:.4}",
        it.positives, it.negatives, it.pairs, it.losses[0]
    ))
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut failures = 0;
    let mut run = |name: &str, limit: Option<Duration>, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let mut out = f();
        let took = t.elapsed();
        if let (Some(l), Ok(detail)) = (limit, &out) {
            if took > l {
                out = Err(format!("{detail}; took {took:.1?}, limit {l:?}"));
            }
        }
        match out {
            Ok(d) => println!("PASS  {name}: {d} [{took:.1?}]"),
            Err(d) => {
                failures += 1;
                println!("FAIL  {name}: {d} [{took:.1?}]");
            }
        }
    };
    run("1 QUALS identity", Some(Duration::from_secs(10)), &c1_quals_identity);
    run("2 pipeline vs brute-force oracle", Some(Duration::from_secs(60)), &c2_pipeline_vs_oracle);
    run("3 gradient checks", None, &c3_gradients);
    run("4 set construction golden test", None, &c4_set_construction);
    run("5 decoding equivalences", None, &c5_decoding);
    let t = Instant::now();
    let exp = setup_experiment();
    let setup = t.elapsed();
    match &exp {
        Ok(e) => {
            run("6 synthetic CONSEQ experiment", Some(Duration::from_secs(600).saturating_sub(setup)), &|| c6_conseq_experiment(e));
            run("7 correlation harness", None, &|| c7_correlation(e));
        }
        Err(m) => {
            run("6 synthetic CONSEQ experiment", None, &|| Err(format!("setup failed: {m}")));
            run("7 correlation harness", None, &|| Err(format!("setup failed: {m}")));
        }
    }
    run("8 REINFORCE degeneracy diagnostic", None, &c8_reinforce_degeneracy);
    run("9 ROUGE / token F1 fixtures and R-C reward", None, &c9_rouge_f1_and_rc);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
