//! Command-line pipeline. Each subcommand is one stage, staged through
//! files in a run directory: synthetic corpus → vocabulary → proxy
//! pretraining → token weights → variant training → attribution and
//! evaluation, plus a gradient-check harness. Identical config and seed
//! reproduce identical artifacts (bitwise, in double precision).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::causal::{
    self, attribute, fmt_f64, load_weights_cache, precompute_weights, save_weights_cache,
    PrecomputedWeights, TokenWeights, WeightsCacheKey,
};
use crate::config::RunConfig;
use crate::corpus::{
    self, build_vocab, corpus_sha256, gen_synthetic, load_raw_samples, load_samples,
    save_raw_samples, split_users, tokenize_corpus, Sample, SynthConfig, Vocab,
};
use crate::engine::{self, grad_check, train, StepLog, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::scalar::{Precision, Scalar};
use crate::util::derive_seed;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "causalign",
    version,
    about = "History-aware next-token training with per-token causal effect weighting"
)]
pub struct Cli {
    /// Run configuration file (TOML, or JSON by extension).
    #[arg(long, global = true, default_value = "causalign.toml")]
    pub config: PathBuf,

    /// Override the master seed (reseeds data generation and training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the numeric precision (single|double).
    #[arg(long, global = true)]
    pub precision: Option<Precision>,

    /// Override the run name (selects the artifact directory).
    #[arg(long, global = true)]
    pub run_name: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic preference corpus and its ground-truth masks.
    GenSynthetic,
    /// Build the vocabulary from the generated corpus.
    BuildVocab,
    /// Pretrain the frozen proxy model on the training split.
    PretrainProxy,
    /// Precompute per-token weights from the proxy's effect scores.
    Weights,
    /// Train one variant from the proxy parameters.
    Train {
        #[arg(long)]
        variant: Variant,
    },
    /// Analyze a checkpoint: weight classification vs ground truth, and
    /// history-driven logit differences.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint to contrast (writes a side-by-side report).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Greedy-decode the held-out split and score it, with and without
    /// history in the prompt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic gradients to finite differences for every variant.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        coords: usize,
    },
}

impl clap::builder::ValueParserFactory for Variant {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Variant>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Precision {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| {
            s.parse::<Precision>().map_err(|e| e.to_string())
        })
    }
}

/// Entry point for the binary: parse `std::env::args` and dispatch.
pub fn run() -> Result<()> {
    dispatch(Cli::parse())
}

/// Parse an explicit argument list (tests use this to drive the CLI
/// in-process).
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::InvalidConfig(format!("argument error: {e}")))?;
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(precision) = cli.precision {
        cfg.precision = precision;
    }
    if let Some(run_name) = cli.run_name {
        cfg.run_name = run_name;
    }
    cfg.validate()?;

    match cli.command {
        Command::GenSynthetic => cmd_gen_synthetic(&cfg),
        Command::BuildVocab => cmd_build_vocab(&cfg),
        Command::PretrainProxy => match cfg.precision {
            Precision::Single => cmd_pretrain_proxy::<f32>(&cfg),
            Precision::Double => cmd_pretrain_proxy::<f64>(&cfg),
        },
        Command::Weights => match cfg.precision {
            Precision::Single => cmd_weights::<f32>(&cfg),
            Precision::Double => cmd_weights::<f64>(&cfg),
        },
        Command::Train { variant } => match cfg.precision {
            Precision::Single => cmd_train::<f32>(&cfg, variant),
            Precision::Double => cmd_train::<f64>(&cfg, variant),
        },
        Command::Attribute { checkpoint, compare } => match cfg.precision {
            Precision::Single => cmd_attribute::<f32>(&cfg, &checkpoint, compare.as_deref()),
            Precision::Double => cmd_attribute::<f64>(&cfg, &checkpoint, compare.as_deref()),
        },
        Command::Eval { checkpoint } => match cfg.precision {
            Precision::Single => cmd_eval::<f32>(&cfg, &checkpoint),
            Precision::Double => cmd_eval::<f64>(&cfg, &checkpoint),
        },
        Command::Gradcheck { coords } => cmd_gradcheck(&cfg, coords),
    }
}

fn ensure_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn cmd_gen_synthetic(cfg: &RunConfig) -> Result<()> {
    ensure_run_dir(cfg)?;
    let raws = gen_synthetic(&cfg.synth)?;
    save_raw_samples(&cfg.corpus_path(), &raws)?;

    let users: std::collections::BTreeSet<&str> =
        raws.iter().map(|r| r.user_id.as_str()).collect();
    let (ones, total) = raws
        .iter()
        .filter_map(|r| r.pref_mask.as_ref())
        .fold((0usize, 0usize), |(o, t), m| {
            (o + m.iter().filter(|&&b| b == 1).count(), t + m.len())
        });
    println!(
        "wrote {} samples for {} users to {}",
        raws.len(),
        users.len(),
        cfg.corpus_path().display()
    );
    if total > 0 {
        println!("preference-token rate: {}", fmt_f64(ones as f64 / total as f64));
    }
    Ok(())
}

fn cmd_build_vocab(cfg: &RunConfig) -> Result<()> {
    ensure_run_dir(cfg)?;
    let raws = load_raw_samples(&cfg.corpus_path())?;
    let vocab = build_vocab(&raws, cfg.max_vocab)?;
    vocab.save(&cfg.vocab_path())?;
    println!(
        "vocabulary: {} tokens (sha256 {}) -> {}",
        vocab.size(),
        vocab.sha256(),
        cfg.vocab_path().display()
    );
    Ok(())
}

/// Loads vocabulary and corpus and splits by user. Returns owned train and
/// held-out sample vectors (the split is deterministic in the corpus).
fn load_split(cfg: &RunConfig) -> Result<(Vocab, Vec<Sample>, Vec<Sample>)> {
    let vocab = Vocab::load(&cfg.vocab_path())?;
    let samples = load_samples(&cfg.corpus_path(), &vocab, cfg.model.max_seq)?;
    let (train_idx, heldout_idx) = split_users(&samples);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((vocab, pick(&train_idx), pick(&heldout_idx)))
}

fn write_loss_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::from("epoch,step,L_n,L_p,L,grad_norm\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch,
            l.step,
            fmt_f64(l.l_n),
            fmt_f64(l.l_p),
            fmt_f64(l.total),
            fmt_f64(l.grad_norm)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn cmd_pretrain_proxy<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    ensure_run_dir(cfg)?;
    let (vocab, train_samples, _) = load_split(cfg)?;
    let dims = cfg.model.dims(vocab.size())?;
    let theta_init = ModelParams::<T>::init(dims, cfg.proxy_init_seed())?;
    let tc = cfg.pretrain_train_config();
    let uniform: Vec<TokenWeights> = train_samples
        .iter()
        .map(|s| TokenWeights::uniform(s.target.len()))
        .collect();
    // The proxy trains from initialization; theta0 is only a fingerprint
    // anchor here and uniform weights never consult it.
    let theta0 = theta_init.clone();
    let (theta, logs) = train(theta_init, &theta0, &train_samples, &uniform, &tc)?;
    save_checkpoint(&theta, &cfg.proxy_path(), &vocab.sha256(), &cfg.sha256())?;
    write_loss_csv(&cfg.proxy_loss_path(), &logs)?;
    match logs.last() {
        Some(last) => println!(
            "proxy: {} steps, final L={} -> {}",
            logs.len(),
            fmt_f64(last.total),
            cfg.proxy_path().display()
        ),
        None => println!(
            "proxy: 0 steps (epochs=0), checkpoint equals initialization -> {}",
            cfg.proxy_path().display()
        ),
    }
    Ok(())
}

fn weights_cache_key<T: Scalar>(
    cfg: &RunConfig,
    proxy: &ModelParams<T>,
    train_samples: &[Sample],
) -> WeightsCacheKey {
    WeightsCacheKey {
        theta0_checksum: proxy.checksum(),
        corpus_sha256: corpus_sha256(train_samples),
        delta: cfg.train.delta,
        lambda: cfg.train.lambda,
        epsilon: cfg.train.epsilon,
    }
}

fn lambda_fraction(pre: &PrecomputedWeights) -> f64 {
    let total: usize = pre.per_sample.iter().map(|w| w.weights.len()).sum();
    let lam: usize = pre
        .per_sample
        .iter()
        .map(|w| (0..w.weights.len()).filter(|&t| w.is_lambda(t)).count())
        .sum();
    lam as f64 / total.max(1) as f64
}

fn cmd_weights<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    ensure_run_dir(cfg)?;
    let (vocab, train_samples, _) = load_split(cfg)?;
    let (proxy, _) = load_checkpoint::<T>(&cfg.proxy_path(), Some(&vocab.sha256()))?;
    let key = weights_cache_key(cfg, &proxy, &train_samples);
    let path = cfg.weights_path();

    let pre = if path.exists() {
        // A present cache must match exactly; a stale one is an error, not a
        // silent recompute — delete it or use a fresh run name.
        let cached = load_weights_cache(&path, &key)?;
        println!("weights cache hit ({} samples), no recomputation", cached.per_sample.len());
        cached
    } else {
        let computed = precompute_weights(
            &proxy,
            &train_samples,
            cfg.train.delta,
            cfg.train.lambda,
            cfg.train.epsilon,
        )?;
        save_weights_cache(&path, &computed)?;
        println!(
            "computed weights for {} samples -> {}",
            computed.per_sample.len(),
            path.display()
        );
        computed
    };
    println!("lambda-weighted token fraction: {}", fmt_f64(lambda_fraction(&pre)));
    Ok(())
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, variant: Variant) -> Result<()> {
    ensure_run_dir(cfg)?;
    let (vocab, train_samples, _) = load_split(cfg)?;
    let (proxy, _) = load_checkpoint::<T>(&cfg.proxy_path(), Some(&vocab.sha256()))?;
    let tc = cfg.variant_train_config(variant);

    let weights: Vec<TokenWeights> = if variant.uses_preference_weights() {
        let key = weights_cache_key(cfg, &proxy, &train_samples);
        load_weights_cache(&cfg.weights_path(), &key)?.per_sample
    } else {
        train_samples
            .iter()
            .map(|s| TokenWeights::uniform(s.target.len()))
            .collect()
    };

    let (theta, logs) = train(proxy.clone(), &proxy, &train_samples, &weights, &tc)?;
    save_checkpoint(&theta, &cfg.checkpoint_path(variant), &vocab.sha256(), &cfg.sha256())?;
    write_loss_csv(&cfg.loss_path(variant), &logs)?;
    match logs.last() {
        Some(last) => println!(
            "{variant}: {} steps, final L_n={} L_p={} L={} -> {}",
            logs.len(),
            fmt_f64(last.l_n),
            fmt_f64(last.l_p),
            fmt_f64(last.total),
            cfg.checkpoint_path(variant).display()
        ),
        None => println!("{variant}: 0 steps, checkpoint equals the proxy"),
    }
    Ok(())
}

fn cmd_attribute<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    compare: Option<&Path>,
) -> Result<()> {
    ensure_run_dir(cfg)?;
    let (vocab, train_samples, _) = load_split(cfg)?;
    let (proxy, _) = load_checkpoint::<T>(&cfg.proxy_path(), Some(&vocab.sha256()))?;
    let (theta, _) = load_checkpoint::<T>(checkpoint, Some(&vocab.sha256()))?;

    let report = attribute(
        &theta,
        &proxy,
        &train_samples,
        cfg.train.delta,
        cfg.train.lambda,
        cfg.train.epsilon,
        &cfg.sha256(),
    )?;
    report.save(&cfg.attribution_path())?;
    let hist_path = cfg.attribution_histogram_path();
    std::fs::write(&hist_path, report.histogram_csv()).map_err(|e| Error::io(&hist_path, e))?;

    println!(
        "attribution over {} tokens: lambda-rate {}, mean |logit diff| {}",
        report.total_tokens,
        fmt_f64(report.lambda_rate),
        fmt_f64(report.mean_abs_logit_diff)
    );
    if let (Some(p), Some(r)) = (report.precision, report.recall) {
        println!("precision {} recall {}", fmt_f64(p), fmt_f64(r));
    }

    if let Some(other) = compare {
        let (theta2, _) = load_checkpoint::<T>(other, Some(&vocab.sha256()))?;
        let report2 = attribute(
            &theta2,
            &proxy,
            &train_samples,
            cfg.train.delta,
            cfg.train.lambda,
            cfg.train.epsilon,
            &cfg.sha256(),
        )?;
        #[derive(serde::Serialize)]
        struct Side<'a> {
            checkpoint: String,
            mean_abs_logit_diff: f64,
            mean_abs_logit_diff_masked: Option<f64>,
            report: &'a causal::AttributionReport,
        }
        #[derive(serde::Serialize)]
        struct Comparison<'a> {
            primary: Side<'a>,
            compare: Side<'a>,
        }
        let side = |path: &Path, r: &'a_fix| ();
        let _ = side;
        let comparison = Comparison {
            primary: Side {
                checkpoint: checkpoint.display().to_string(),
                mean_abs_logit_diff: report.mean_abs_logit_diff,
                mean_abs_logit_diff_masked: report.mean_abs_logit_diff_masked,
                report: &report,
            },
            compare: Side {
                checkpoint: other.display().to_string(),
                mean_abs_logit_diff: report2.mean_abs_logit_diff,
                mean_abs_logit_diff_masked: report2.mean_abs_logit_diff_masked,
                report: &report2,
            },
        };
        let out = serde_json::to_string_pretty(&comparison)
            .expect("comparison serialization cannot fail");
        let path = cfg.attribution_compare_path();
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        println!(
            "comparison: mean |logit diff| {} vs {} -> {}",
            fmt_f64(report.mean_abs_logit_diff),
            fmt_f64(report2.mean_abs_logit_diff),
            path.display()
        );
    }
    Ok(())
}

fn eval_csv(cfg: &RunConfig, checkpoint: &Path, with: &EvalReport, without: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config {}\n", cfg.sha256()));
    out.push_str(&format!("# checkpoint {}\n", checkpoint.display()));
    out.push_str("mode,user_id,rouge1_f,rougeL_f,meteor,bleu,pref_recall\n");
    let mut emit = |mode: &str, report: &EvalReport| {
        for r in &report.rows {
            let pr = match (r.pref_matched, r.pref_marked) {
                (Some(m), Some(n)) if n > 0 => fmt_f64(m as f64 / n as f64),
                _ => String::new(),
            };
            out.push_str(&format!(
                "{mode},{},{},{},{},{},{pr}\n",
                r.user_id,
                fmt_f64(r.rouge1_f),
                fmt_f64(r.rougel_f),
                fmt_f64(r.meteor),
                fmt_f64(r.bleu)
            ));
        }
        out.push_str(&format!(
            "{mode},mean,{},{},{},{},{}\n",
            fmt_f64(report.mean.rouge1_f),
            fmt_f64(report.mean.rougel_f),
            fmt_f64(report.mean.meteor),
            fmt_f64(report.mean.bleu),
            report.mean.pref_recall.map(fmt_f64).unwrap_or_default()
        ));
    };
    emit("with_history", with);
    emit("without_history", without);
    out
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    ensure_run_dir(cfg)?;
    let (vocab, _, heldout) = load_split(cfg)?;
    if heldout.is_empty() {
        return Err(Error::EmptyCorpus("empty evaluation set".into()));
    }
    let (theta, _) = load_checkpoint::<T>(checkpoint, Some(&vocab.sha256()))?;
    let with = evaluate_corpus(&theta, &heldout, true)?;
    let without = evaluate_corpus(&theta, &heldout, false)?;
    let csv = eval_csv(cfg, checkpoint, &with, &without);
    let path = cfg.eval_path(checkpoint);
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!(
        "eval ({} held-out samples): rouge1 {} / {} (with/without history) -> {}",
        heldout.len(),
        fmt_f64(with.mean.rouge1_f),
        fmt_f64(without.mean.rouge1_f),
        path.display()
    );
    Ok(())
}

/// Gradient check corpus: a miniature synthetic set independent of the run's
/// main corpus, so the command needs no prior pipeline stages.
fn gradcheck_fixture(cfg: &RunConfig) -> Result<(Vec<Sample>, usize)> {
    let synth = SynthConfig {
        n_users: 3,
        pref_lexicon_size: 4,
        shared_lexicon_size: 10,
        samples_per_user: 2,
        pref_injection_prob: 0.8,
        history_len: 2,
        target_len: 6,
        seed: derive_seed("gradcheck-corpus", &[cfg.seed]),
    };
    let raws = gen_synthetic(&synth)?;
    let cap = cfg.model.vocab_size.unwrap_or(64);
    let vocab = build_vocab(&raws, cap)?;
    let samples = tokenize_corpus(&raws, &vocab, cfg.model.max_seq)?;
    Ok((samples, vocab.size()))
}

fn cmd_gradcheck(cfg: &RunConfig, coords: usize) -> Result<()> {
    let (samples, vocab_size) = gradcheck_fixture(cfg)?;
    let dims = cfg.model.dims(vocab_size)?;
    let theta = ModelParams::<f64>::init(dims, derive_seed("gradcheck-theta", &[cfg.seed]))?;
    let theta0 = ModelParams::<f64>::init(dims, derive_seed("gradcheck-proxy", &[cfg.seed]))?;

    let batch: Vec<&Sample> = samples.iter().take(2).collect();
    let alpha = if cfg.train.alpha > 0.0 { cfg.train.alpha } else { 0.05 };
    let owned: Vec<Sample> = batch.iter().map(|&s| s.clone()).collect();
    let pre = precompute_weights(&theta0, &owned, cfg.train.delta, cfg.train.lambda, cfg.train.epsilon)?;
    let w_refs: Vec<&TokenWeights> = pre.per_sample.iter().collect();

    let mut worst = (0.0f64, String::new());
    let mut all_pass = true;
    for (vi, variant) in Variant::ALL.into_iter().enumerate() {
        let tc = TrainConfig {
            variant,
            alpha,
            delta: cfg.train.delta,
            lambda: cfg.train.lambda,
            epsilon: cfg.train.epsilon,
            dropout: 0.0,
            ..cfg.train.clone()
        };
        let report = grad_check(
            &theta,
            &theta0,
            &batch,
            &w_refs,
            &tc,
            coords,
            1e-5,
            derive_seed("gradcheck-coords", &[cfg.seed, vi as u64]),
        )?;
        let pass = report.max_rel_err < GRADCHECK_THRESHOLD;
        all_pass &= pass;
        if report.max_rel_err > worst.0 {
            let tensor = report
                .coords
                .iter()
                .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
                .map(|c| format!("{} ({})", c.tensor, variant))
                .unwrap_or_default();
            worst = (report.max_rel_err, tensor);
        }
        println!(
            "{variant}: max_rel_err={:.3e} coords={} {}",
            report.max_rel_err,
            report.coords.len(),
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if !all_pass {
        return Err(Error::GradCheckFailed {
            max_rel_err: worst.0,
            threshold: GRADCHECK_THRESHOLD,
            worst: worst.1,
        });
    }
    Ok(())
}
