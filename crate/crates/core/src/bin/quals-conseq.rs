use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use quals_conseq::conseq::{
    build_positive_pool, conseq_train, conseq_train_online, intersect_pools, sample_negative_pool, write_pool_file,
    ConseqExample, Origin, PoolLine, QualsF1Reward, QualsReward, RewardFunction, RougeSumReward,
    ScoredSummary, Variant,
};
use quals_conseq::corpuskit::{generate_corpus, read_corpus, read_vocab, write_corpus, write_vocab, AppConfig, CorruptionSpec};
use quals_conseq::evalharness::{bin_correlation, rouge};
use quals_conseq::qagsref::{qags_score, QagsComponents};
use quals_conseq::quals::{quals_score, read_scored, write_scored, ScoredRecord};
use quals_conseq::seqmodel::{generate, load_checkpoint, mle_fit, save_checkpoint, Optimizer, PointerRnn, Seq2Seq, TokenSequence, Vocabulary};
use quals_conseq::{Error, Result};

#[derive(Parser)]
#[command(name = "quals-conseq", version, about = "QA-based factual consistency scoring and contrastive fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with injected factual errors.
    GenCorpus {
        /// JSON corruption spec; absent keys take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score each corpus summary with QUALS.
    ScoreQuals(ScoreArgs),
    /// Score each corpus summary with the QAGS reference pipeline.
    ScoreQags(ScoreArgs),
    /// Build contrastive pairs from ground-truth scores and model samples.
    BuildSets {
        #[arg(long)]
        gt_scores: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `paths.corpus` of the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a summarizer with one of the contrastive variants.
    Train {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long, value_enum)]
        reward: RewardArg,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Decode summaries and report ROUGE and QUALS against the corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "rouge,quals")]
        metrics: Vec<Metric>,
    },
    /// Bin two scored files by the first score and correlate with the second.
    Correlate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Also write `percentile,mean,stdev` plot data here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ScoreArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Summarizer checkpoint; only its vocabulary is used.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Offline,
    Online,
    Weighted,
    PositiveOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Quals,
    QualsF1,
    RougeSum,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Metric {
    Rouge,
    Quals,
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    path.map_or_else(|| Ok(AppConfig::default()), AppConfig::load)
}

/// Vocabulary lookup order: explicit file, config path, checkpoint, then
/// `vocab.json` beside the corpus.
fn resolve_vocab(explicit: Option<&Path>, cfg: &AppConfig, model: Option<&Path>, corpus: Option<&Path>) -> Result<Vocabulary> {
    if let Some(p) = explicit.or(cfg.paths.vocab.as_deref()) {
        return read_vocab(p);
    }
    if let Some(m) = model {
        return Ok(load_checkpoint::<PointerRnn>(m)?.vocab().clone());
    }
    let beside = corpus.and_then(Path::parent).map(|d| d.join("vocab.json"));
    match beside {
        Some(p) if p.exists() => read_vocab(&p),
        _ => Err(Error::InvalidInput("no vocabulary: pass --vocab or set paths.vocab".into())),
    }
}

fn load_examples(path: &Path, vocab: &Vocabulary) -> Result<Vec<ConseqExample>> {
    read_corpus(path)?.iter().map(|e| e.to_conseq(vocab)).collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn gen_corpus(spec: Option<&Path>, n: usize, out: &Path) -> Result<()> {
    let spec: CorruptionSpec = match spec {
        Some(p) => serde_json::from_slice(&fs::read(p)?).map_err(|e| Error::InvalidSpec(format!("{}: {e}", p.display())))?,
        None => CorruptionSpec::default(),
    };
    let corpus = generate_corpus(&spec, n)?;
    fs::create_dir_all(out)?;
    write_corpus(&corpus.clean, &out.join("clean.jsonl"))?;
    write_corpus(&corpus.corrupted, &out.join("corrupted.jsonl"))?;
    write_vocab(&corpus.vocab, &out.join("vocab.json"))?;
    let mut labels = String::new();
    for l in &corpus.labels {
        labels.push_str(&serde_json::to_string(l)?);
        labels.push('\n');
    }
    fs::write(out.join("labels.jsonl"), labels)?;
    let corrupted = corpus.labels.iter().filter(|l| l.kind.is_some()).count();
    info!("{n} documents, {corrupted} corrupted, written to {}", out.display());
    Ok(())
}

fn score(args: &ScoreArgs, qags: bool) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let vocab = resolve_vocab(args.vocab.as_deref(), &cfg, args.model.as_deref(), Some(&args.corpus))?;
    let corpus = read_corpus(&args.corpus)?;
    let qa = cfg.quals.backend(vocab.clone())?;
    let records: Vec<ScoredRecord> = if qags {
        let boundary: Vec<&str> = cfg.quals.boundary.iter().map(String::as_str).collect();
        let comps = QagsComponents::toy(&vocab, qa, &boundary)?;
        corpus
            .par_iter()
            .map(|e| {
                let r = qags_score(&e.document, &e.summary, &comps)?;
                Ok(ScoredRecord {
                    id: e.id.clone(),
                    score: r.score,
                    unscorable: r.unscorable,
                    pairs: Vec::new(),
                })
            })
            .collect::<Result<_>>()?
    } else {
        corpus
            .par_iter()
            .map(|e| {
                let (d, s) = e.encode(&vocab)?;
                let r = quals_score(&qa, &d, &s, &cfg.quals.generation)?;
                Ok(ScoredRecord::from_quals(&e.id, &r, &vocab))
            })
            .collect::<Result<_>>()?
    };
    let key = if qags { "qags" } else { "quals" };
    write_scored(&args.out, key, &records)?;
    info!("{} records scored, {} unscorable", records.len(), records.iter().filter(|r| r.unscorable).count());
    Ok(())
}

fn build_sets(gt_scores: &Path, model: &Path, config: Option<&Path>, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let model: PointerRnn = load_checkpoint(model)?;
    let vocab = model.vocab().clone();
    let corpus = corpus
        .or(cfg.paths.corpus.as_deref())
        .ok_or_else(|| Error::InvalidInput("no corpus: pass --corpus or set paths.corpus".into()))?;
    let examples = load_examples(corpus, &vocab)?;
    let by_id: HashMap<&str, &ConseqExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut gt = Vec::new();
    for r in read_scored(gt_scores, None)? {
        let ex = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("scored id {:?} is not in the corpus", r.id)))?;
        gt.push(ScoredSummary {
            doc_id: r.id.clone(),
            summary: ex.reference.clone(),
            origin: Origin::GroundTruth,
            reward: r.score.into(),
        });
    }
    let positives = build_positive_pool(&gt, cfg.conseq.p)?;
    let reward = QualsReward {
        qagen: cfg.quals.backend(vocab.clone())?,
        config: cfg.quals.generation.clone(),
    };
    let negatives = sample_negative_pool(&model, &examples, &reward, &cfg.conseq, 0)?;
    let docs: HashMap<String, TokenSequence> = examples.iter().map(|e| (e.id.clone(), e.document.clone())).collect();
    let inter = intersect_pools(&positives, &negatives.pool, &docs)?;
    let lines: Vec<PoolLine> = inter.pairs.iter().map(|p| PoolLine::from_pair(p, &vocab)).collect();
    write_pool_file(out, &lines)?;
    info!(
        "{} positives, {} negatives, {} pairs ({} inverted dropped)",
        positives.len(),
        negatives.pool.len(),
        lines.len(),
        inter.inverted.len()
    );
    Ok(())
}

fn train(variant: VariantArg, reward: RewardArg, config: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.conseq.variant = match variant {
        VariantArg::Offline => Variant::Offline,
        VariantArg::Online => Variant::Online,
        VariantArg::Weighted => Variant::Weighted,
        VariantArg::PositiveOnly => Variant::PositiveOnly,
    };
    cfg.conseq.validate()?;
    let corpus_path = cfg
        .paths
        .corpus
        .clone()
        .ok_or_else(|| Error::InvalidConfig("paths.corpus is required for training".into()))?;
    let run_dir = cfg.paths.run_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    let vocab = resolve_vocab(None, &cfg, cfg.paths.checkpoint.as_deref(), Some(&corpus_path))?;
    let examples = load_examples(&corpus_path, &vocab)?;

    let mut model = match &cfg.paths.checkpoint {
        Some(p) => load_checkpoint::<PointerRnn>(p)?,
        None => {
            let mut m = PointerRnn::new(cfg.model.pointer.clone(), vocab.clone(), cfg.model.init_seed)?;
            let data: Vec<_> = examples.iter().map(|e| (e.document.clone(), e.reference.clone())).collect();
            let mut opt = Optimizer::adam(cfg.model.mle_learning_rate);
            let losses = mle_fit(&mut m, &mut opt, &data, cfg.model.mle_epochs, cfg.model.mle_batch_size, cfg.model.init_seed)?;
            info!("MLE warm start, epoch losses {losses:?}");
            save_checkpoint(&run_dir.join("mle"), 0, &m)?;
            m
        }
    };

    let reward: Box<dyn RewardFunction> = match reward {
        RewardArg::Quals => Box::new(QualsReward {
            qagen: cfg.quals.backend(vocab.clone())?,
            config: cfg.quals.generation.clone(),
        }),
        RewardArg::QualsF1 => Box::new(QualsF1Reward {
            qagen: cfg.quals.backend(vocab.clone())?,
            config: cfg.quals.generation.clone(),
        }),
        RewardArg::RougeSum => Box::new(RougeSumReward { vocab: vocab.clone() }),
    };
    let report = if cfg.conseq.variant == Variant::Online {
        serde_json::to_value(conseq_train_online(&mut model, &examples, reward.as_ref(), &cfg.conseq)?)?
    } else {
        serde_json::to_value(conseq_train(&mut model, &examples, reward.as_ref(), &cfg.conseq)?)?
    };
    let ckpt = save_checkpoint(&run_dir, cfg.conseq.outer_iterations as u64, &model)?;
    write_json(&run_dir.join("report.json"), &report)?;
    cfg.save(&run_dir.join("config.json"))?;
    println!("{}", ckpt.display());
    Ok(())
}

fn eval(corpus: &Path, model: &Path, config: Option<&Path>, metrics: &[Metric]) -> Result<()> {
    let cfg = load_config(config)?;
    let model: PointerRnn = load_checkpoint(model)?;
    let vocab = model.vocab().clone();
    let examples = load_examples(corpus, &vocab)?;
    let qa = cfg.quals.backend(vocab.clone())?;
    let eos = vocab.eos();
    let rows: Vec<(Option<[f64; 3]>, Option<Option<f64>>)> = examples
        .par_iter()
        .map(|e| {
            let mut ids = generate(&model, &e.document, &cfg.generation)?.remove(0).sequence.ids;
            if ids.last() == Some(&eos) {
                ids.pop();
            }
            let text = vocab.decode(&ids);
            let r = metrics.contains(&Metric::Rouge).then(|| {
                let s = rouge(&text, &vocab.decode(&e.reference.ids));
                [s.r1, s.r2, s.rl]
            });
            let q = if metrics.contains(&Metric::Quals) && !ids.is_empty() {
                Some(quals_score(&qa, &e.document, &TokenSequence::new(ids), &cfg.quals.generation)?.score)
            } else if metrics.contains(&Metric::Quals) {
                Some(None)
            } else {
                None
            };
            Ok((r, q))
        })
        .collect::<Result<_>>()?;
    let mut out = json!({ "documents": rows.len() });
    if metrics.contains(&Metric::Rouge) {
        let n = rows.len().max(1) as f64;
        let mean = |i: usize| rows.iter().filter_map(|r| r.0).map(|r| r[i]).sum::<f64>() / n;
        out["rouge1"] = json!(mean(0));
        out["rouge2"] = json!(mean(1));
        out["rougeL"] = json!(mean(2));
    }
    if metrics.contains(&Metric::Quals) {
        let scored: Vec<f64> = rows.iter().filter_map(|r| r.1.flatten()).collect();
        let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        out["quals"] = json!(mean);
        out["quals_unscorable"] = json!(rows.len() - scored.len());
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn correlate(a: &Path, b: &Path, bins: usize, csv: Option<&Path>) -> Result<()> {
    let partner: HashMap<String, Option<f64>> = read_scored(b, None)?.into_iter().map(|r| (r.id, r.score)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for r in read_scored(a, None)? {
        match (r.score, partner.get(&r.id).copied().flatten()) {
            (Some(x), Some(y)) => {
                xs.push(x);
                ys.push(y);
            }
            _ => skipped += 1,
        }
    }
    info!("{} ids joined, {skipped} skipped as missing or unscorable", xs.len());
    let report = bin_correlation(&xs, &ys, bins)?;
    if let Some(p) = csv {
        fs::write(p, report.to_csv())?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { spec, n, out } => gen_corpus(spec.as_deref(), n, &out),
        Command::ScoreQuals(a) => score(&a, false),
        Command::ScoreQags(a) => score(&a, true),
        Command::BuildSets {
            gt_scores,
            model,
            config,
            corpus,
            out,
        } => build_sets(&gt_scores, &model, config.as_deref(), corpus.as_deref(), &out),
        Command::Train { variant, reward, config } => train(variant, reward, config.as_deref()),
        Command::Eval {
            corpus,
            model,
            config,
            metrics,
        } => eval(&corpus, &model, config.as_deref(), &metrics),
        Command::Correlate { a, b, bins, csv } => correlate(&a, &b, bins, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
