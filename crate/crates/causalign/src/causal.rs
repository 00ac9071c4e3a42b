//! Causal effect measurement and its products: per-vocabulary effect
//! vectors, per-token effect scores under a frozen proxy model, the
//! score-thresholded token weights with their disk cache, and the
//! attribution report comparing weights to ground-truth preference masks.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{corpus_sha256, pack_context, Sample};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::mat::{softmax_in_place, Mat};
use crate::scalar::Scalar;

/// How history shifts the model's full next-token distribution at one
/// position: with-history probabilities minus history-ablated probabilities.
/// Entries lie in [−1, 1] and sum to zero up to rounding, since both rows
/// are distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectVector {
    pub values: Vec<f64>,
}

impl EffectVector {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Effect vector from two probability rows over the same vocabulary.
pub fn effect_from_probs(with: &[f64], without: &[f64]) -> EffectVector {
    debug_assert_eq!(with.len(), without.len());
    EffectVector {
        values: with.iter().zip(without).map(|(a, b)| a - b).collect(),
    }
}

/// Target-position probability and logit rows for a sample under one
/// packing: row t is the model's next-token view for target token t.
fn target_rows<T: Scalar>(
    params: &ModelParams<T>,
    sample: &Sample,
    with_history: bool,
) -> Result<(Mat<T>, Mat<T>)> {
    let dims = params.dims();
    let packed = pack_context(sample, with_history, dims.vocab_size, dims.max_seq)?;
    let all_logits = forward(params, &packed.ids)?;
    let span = packed.target_span;
    let mut logits = Mat::zeros(span.len, dims.vocab_size);
    let mut probs = Mat::zeros(span.len, dims.vocab_size);
    for (t, r) in span.pred_rows().enumerate() {
        logits.row_mut(t).copy_from_slice(all_logits.row(r));
        probs.row_mut(t).copy_from_slice(all_logits.row(r));
        softmax_in_place(probs.row_mut(t));
    }
    Ok((logits, probs))
}

/// Model-side causal effect of the history on the prediction of target
/// token `t`: the difference of the two passes' full distributions.
pub fn prediction_effect<T: Scalar>(
    params: &ModelParams<T>,
    sample: &Sample,
    t: usize,
) -> Result<EffectVector> {
    if t >= sample.target.len() {
        return Err(Error::InvalidConfig(format!(
            "position {t} out of range for a target of {} tokens",
            sample.target.len()
        )));
    }
    let (_, probs_with) = target_rows(params, sample, true)?;
    let (_, probs_without) = target_rows(params, sample, false)?;
    let with: Vec<f64> = probs_with.row(t).iter().map(|v| v.as_f64()).collect();
    let without: Vec<f64> = probs_without.row(t).iter().map(|v| v.as_f64()).collect();
    Ok(effect_from_probs(&with, &without))
}

/// Data-side effect score for every target position of a sample: the
/// probability the model assigns the realized token with history, minus
/// without. One pair of forward passes covers all positions.
pub fn effect_scores<T: Scalar>(params: &ModelParams<T>, sample: &Sample) -> Result<Vec<f64>> {
    let (_, probs_with) = target_rows(params, sample, true)?;
    let (_, probs_without) = target_rows(params, sample, false)?;
    Ok(sample
        .target
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            probs_with.get(t, y as usize).as_f64() - probs_without.get(t, y as usize).as_f64()
        })
        .collect())
}

/// Effect score at a single position under the frozen proxy.
pub fn gt_token_effect<T: Scalar>(
    theta0: &ModelParams<T>,
    sample: &Sample,
    t: usize,
) -> Result<f64> {
    if t >= sample.target.len() {
        return Err(Error::InvalidConfig(format!(
            "position {t} out of range for a target of {} tokens",
            sample.target.len()
        )));
    }
    Ok(effect_scores(theta0, sample)?[t])
}

/// Thresholded weight assignment: ω_t = λ where the score strictly exceeds
/// δ, else ε. A score exactly at the threshold counts as generic.
pub fn assign_weights(scores: &[f64], delta: f64, lambda: f64, epsilon: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| if s > delta { lambda } else { epsilon })
        .collect()
}

/// Per-token loss weights for one sample, tagged with the parameters that
/// produced them and the checksum of the proxy model they came from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenWeights {
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub fingerprint: String,
}

impl TokenWeights {
    /// Uniform unit weights, used by the unweighted training variants.
    pub fn uniform(len: usize) -> TokenWeights {
        TokenWeights {
            weights: vec![1.0; len],
            lambda: 1.0,
            epsilon: 1.0,
            delta: 0.0,
            fingerprint: "uniform".into(),
        }
    }

    pub fn is_lambda(&self, t: usize) -> bool {
        self.weights[t] == self.lambda
    }
}

/// The full weight table for a corpus plus everything that keys its cache.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedWeights {
    pub per_sample: Vec<TokenWeights>,
    pub scores: Vec<Vec<f64>>,
    pub key: WeightsCacheKey,
}

/// Identity of a weight computation: proxy parameters, corpus content, and
/// the threshold settings. Any difference invalidates a cache.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightsCacheKey {
    pub theta0_checksum: String,
    pub corpus_sha256: String,
    pub delta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

/// Scores every sample under the frozen proxy and assigns weights. The
/// proxy is evaluated but never modified.
pub fn precompute_weights<T: Scalar>(
    theta0: &ModelParams<T>,
    samples: &[Sample],
    delta: f64,
    lambda: f64,
    epsilon: f64,
) -> Result<PrecomputedWeights> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus("no samples to weight".into()));
    }
    let fingerprint = theta0.checksum();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    for sample in samples {
        let s = effect_scores(theta0, sample)?;
        per_sample.push(TokenWeights {
            weights: assign_weights(&s, delta, lambda, epsilon),
            lambda,
            epsilon,
            delta,
            fingerprint: fingerprint.clone(),
        });
        scores.push(s);
    }
    Ok(PrecomputedWeights {
        per_sample,
        scores,
        key: WeightsCacheKey {
            theta0_checksum: fingerprint,
            corpus_sha256: corpus_sha256(samples),
            delta,
            lambda,
            epsilon,
        },
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct WeightsCacheEntry {
    sample_index: usize,
    weights: Vec<f64>,
    scores: Vec<f64>,
}

/// Writes the weight table as JSONL: a key header line, then one line per
/// sample with its weights and raw scores.
pub fn save_weights_cache(path: &Path, pre: &PrecomputedWeights) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &pre.key).expect("cache key serialization cannot fail");
    out.push(b'\n');
    for (i, (w, s)) in pre.per_sample.iter().zip(&pre.scores).enumerate() {
        let entry = WeightsCacheEntry {
            sample_index: i,
            weights: w.weights.clone(),
            scores: s.clone(),
        };
        serde_json::to_writer(&mut out, &entry).expect("cache entry serialization cannot fail");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Loads a weight cache and verifies it was computed for exactly the given
/// key; any mismatch (different proxy, corpus, or thresholds) is an error so
/// stale weights are never silently reused. No model evaluation happens on
/// this path.
pub fn load_weights_cache(path: &Path, expected: &WeightsCacheKey) -> Result<PrecomputedWeights> {
    let file = std::fs::File::open(path).map_err(|e| Error::MissingArtifact {
        what: "token-weight cache",
        path: path.to_path_buf(),
        hint: format!("run `causalign weights` first ({e})"),
    })?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::Parse {
            what: "token-weight cache",
            path: path.to_path_buf(),
            reason: "file is empty".into(),
        })?;
    let key: WeightsCacheKey = serde_json::from_str(&header).map_err(|e| Error::Parse {
        what: "token-weight cache",
        path: path.to_path_buf(),
        reason: format!("bad header: {e}"),
    })?;
    if key != *expected {
        return Err(Error::FingerprintMismatch {
            what: "token-weight cache",
            expected: format!("{expected:?}"),
            found: format!("{key:?}"),
        });
    }
    let mut per_sample = Vec::new();
    let mut scores = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: WeightsCacheEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: "token-weight cache",
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 2),
        })?;
        if entry.sample_index != per_sample.len() {
            return Err(Error::Parse {
                what: "token-weight cache",
                path: path.to_path_buf(),
                reason: format!(
                    "line {}: sample_index {} out of order",
                    i + 2,
                    entry.sample_index
                ),
            });
        }
        per_sample.push(TokenWeights {
            weights: entry.weights,
            lambda: key.lambda,
            epsilon: key.epsilon,
            delta: key.delta,
            fingerprint: key.theta0_checksum.clone(),
        });
        scores.push(entry.scores);
    }
    if per_sample.is_empty() {
        return Err(Error::Parse {
            what: "token-weight cache",
            path: path.to_path_buf(),
            reason: "no entries after the header".into(),
        });
    }
    Ok(PrecomputedWeights {
        per_sample,
        scores,
        key,
    })
}

/// |logit diff| histogram: 64 uniform bins over [0, max observed], or a
/// single degenerate bin when every value is zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Histogram {
    /// Bin boundaries; `edges.len() == counts.len() + 1`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 64;

pub fn build_histogram(abs_values: &[f64]) -> Histogram {
    let max = abs_values.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Histogram {
            edges: vec![0.0, 0.0],
            counts: vec![abs_values.len() as u64],
        };
    }
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &v in abs_values {
        let idx = ((v / max * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[idx] += 1;
    }
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| max * i as f64 / HISTOGRAM_BINS as f64)
        .collect();
    Histogram { edges, counts }
}

/// One sample's attribution row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttributionSample {
    pub user_id: String,
    /// Effect scores at the realized tokens, under the model being analyzed.
    pub scores: Vec<f64>,
    /// Weights assigned from the frozen proxy.
    pub weights: Vec<f64>,
    /// Logit difference (with − without history) at the realized tokens,
    /// under the model being analyzed.
    pub logit_diffs: Vec<f64>,
    pub pref_mask: Option<Vec<bool>>,
}

/// Corpus-level attribution: how the weight classification lines up with
/// ground-truth preference masks, and how strongly history moves the
/// model's logits at each target token.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttributionReport {
    pub config_sha256: String,
    pub theta_checksum: String,
    pub theta0_checksum: String,
    pub delta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub total_tokens: usize,
    /// Fraction of tokens classified preference-bearing (ω = λ).
    pub lambda_rate: f64,
    /// Fraction of tokens whose ground-truth mask is true; None without masks.
    pub mask_rate: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Expected precision of a random classifier marking tokens at the same
    /// λ-rate: the mask rate itself.
    pub baseline_precision: Option<f64>,
    /// Expected recall of that random classifier: the λ-rate itself.
    pub baseline_recall: Option<f64>,
    pub improvement_precision: Option<f64>,
    pub improvement_recall: Option<f64>,
    pub mean_abs_logit_diff: f64,
    pub mean_abs_logit_diff_masked: Option<f64>,
    pub mean_abs_logit_diff_unmasked: Option<f64>,
    pub histogram: Histogram,
    pub samples: Vec<AttributionSample>,
}

/// Precision/recall of a binary classification against a ground-truth mask.
/// Returns (precision, recall, f1), each None when its denominator is zero.
pub(crate) fn classification_stats(
    pairs: impl Iterator<Item = (bool, bool)>,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (predicted, actual) in pairs {
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    (precision, recall, f1)
}

/// Runs the full attribution analysis: weights from the frozen proxy
/// `theta0`, effect scores and logit differences from `theta`, classification
/// quality against the ground-truth masks where present, and the logit-diff
/// histogram.
#[allow(clippy::too_many_arguments)]
pub fn attribute<T: Scalar>(
    theta: &ModelParams<T>,
    theta0: &ModelParams<T>,
    samples: &[Sample],
    delta: f64,
    lambda: f64,
    epsilon: f64,
    config_sha256: &str,
) -> Result<AttributionReport> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus("no samples to attribute".into()));
    }
    let pre = precompute_weights(theta0, samples, delta, lambda, epsilon)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (sample, w) in samples.iter().zip(&pre.per_sample) {
        let scores = effect_scores(theta, sample)?;
        let (logits_with, _) = target_rows(theta, sample, true)?;
        let (logits_without, _) = target_rows(theta, sample, false)?;
        let logit_diffs: Vec<f64> = sample
            .target
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                logits_with.get(t, y as usize).as_f64()
                    - logits_without.get(t, y as usize).as_f64()
            })
            .collect();
        rows.push(AttributionSample {
            user_id: sample.user_id.clone(),
            scores,
            weights: w.weights.clone(),
            logit_diffs,
            pref_mask: sample.pref_mask.clone(),
        });
    }

    let total_tokens: usize = rows.iter().map(|r| r.weights.len()).sum();
    let lambda_count: usize = rows
        .iter()
        .zip(&pre.per_sample)
        .map(|(r, w)| (0..r.weights.len()).filter(|&t| w.is_lambda(t)).count())
        .sum();
    let lambda_rate = lambda_count as f64 / total_tokens as f64;

    let all_masked = rows.iter().all(|r| r.pref_mask.is_some());
    let (mask_rate, precision, recall, f1) = if all_masked {
        let mask_count: usize = rows
            .iter()
            .map(|r| r.pref_mask.as_ref().unwrap().iter().filter(|&&m| m).count())
            .sum();
        let pairs = rows.iter().zip(&pre.per_sample).flat_map(|(r, w)| {
            let mask = r.pref_mask.as_ref().unwrap();
            (0..mask.len()).map(move |t| (w.is_lambda(t), mask[t]))
        });
        let (p, r, f) = classification_stats(pairs);
        (Some(mask_count as f64 / total_tokens as f64), p, r, f)
    } else {
        (None, None, None, None)
    };

    let abs_lds: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.logit_diffs.iter().map(|v| v.abs()))
        .collect();
    let mean_abs_logit_diff = abs_lds.iter().sum::<f64>() / abs_lds.len() as f64;
    let (masked_mean, unmasked_mean) = if all_masked {
        let mut m_sum = 0.0;
        let mut m_n = 0usize;
        let mut u_sum = 0.0;
        let mut u_n = 0usize;
        for r in &rows {
            let mask = r.pref_mask.as_ref().unwrap();
            for (t, &ld) in r.logit_diffs.iter().enumerate() {
                if mask[t] {
                    m_sum += ld.abs();
                    m_n += 1;
                } else {
                    u_sum += ld.abs();
                    u_n += 1;
                }
            }
        }
        (
            (m_n > 0).then(|| m_sum / m_n as f64),
            (u_n > 0).then(|| u_sum / u_n as f64),
        )
    } else {
        (None, None)
    };

    let baseline_precision = mask_rate;
    let baseline_recall = all_masked.then_some(lambda_rate);
    let improvement = |value: Option<f64>, base: Option<f64>| match (value, base) {
        (Some(v), Some(b)) if b > 0.0 => Some(v / b),
        _ => None,
    };

    Ok(AttributionReport {
        config_sha256: config_sha256.to_string(),
        theta_checksum: theta.checksum(),
        theta0_checksum: pre.key.theta0_checksum.clone(),
        delta,
        lambda,
        epsilon,
        total_tokens,
        lambda_rate,
        mask_rate,
        precision,
        recall,
        f1,
        baseline_precision,
        baseline_recall,
        improvement_precision: improvement(precision, baseline_precision),
        improvement_recall: improvement(recall, baseline_recall),
        mean_abs_logit_diff,
        mean_abs_logit_diff_masked: masked_mean,
        mean_abs_logit_diff_unmasked: unmasked_mean,
        histogram: build_histogram(&abs_lds),
        samples: rows,
    })
}

impl AttributionReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Histogram as CSV rows: bin_start, bin_end, count.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, &c) in self.histogram.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(self.histogram.edges[i]),
                fmt_f64(self.histogram.edges[i + 1]),
                c
            ));
        }
        out
    }
}

/// Deterministic float formatting for CSV artifacts: the shortest string
/// that round-trips the exact f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // `{}` on f64 already prints the shortest round-trip form.
    format!("{v}")
}
