//! Generation-quality metrics over token sequences: ROUGE-1, ROUGE-L, BLEU,
//! an exact-match METEOR variant, and preference-token recall, plus greedy
//! corpus evaluation.

use std::collections::HashMap;

use crate::corpus::{pack_context, Sample};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ModelParams};
use crate::scalar::Scalar;

/// Precision / recall / F1 triple for the ROUGE family.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_pr(precision: f64, recall: f64) -> RougeScore {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }
}

fn counts(tokens: &[u32]) -> HashMap<u32, usize> {
    let mut m = HashMap::new();
    for &t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// ROUGE-1: clipped unigram overlap. Empty inputs score zero.
pub fn rouge_1(hypothesis: &[u32], reference: &[u32]) -> RougeScore {
    if hypothesis.is_empty() || reference.is_empty() {
        return RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let h = counts(hypothesis);
    let r = counts(reference);
    let overlap: usize = h
        .iter()
        .map(|(tok, &c)| c.min(r.get(tok).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_pr(
        overlap as f64 / hypothesis.len() as f64,
        overlap as f64 / reference.len() as f64,
    )
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: longest common subsequence, order-sensitive.
pub fn rouge_l(hypothesis: &[u32], reference: &[u32]) -> RougeScore {
    if hypothesis.is_empty() || reference.is_empty() {
        return RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    RougeScore::from_pr(lcs / hypothesis.len() as f64, lcs / reference.len() as f64)
}

pub const BLEU_MAX_N: usize = 4;

fn ngram_counts(s: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU in [0, 100]: geometric mean of clipped n-gram precisions up
/// to 4-grams. Zero clipped counts are add-one smoothed for n ≥ 2 only, so a
/// hypothesis sharing no unigrams with the reference scores exactly zero.
/// Brevity penalty exp(1 − |ref|/|hyp|) applies when the hypothesis is
/// shorter than the reference.
pub fn bleu(hypothesis: &[u32], reference: &[u32]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_N {
        let h = ngram_counts(hypothesis, n);
        let r = ngram_counts(reference, n);
        let total: usize = h.values().sum();
        let clipped: usize = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if clipped == 0 && n >= 2 {
            (clipped + 1) as f64 / (total + 1) as f64
        } else if total == 0 {
            0.0
        } else {
            clipped as f64 / total as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = if hypothesis.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hypothesis.len() as f64).exp()
    };
    100.0 * bp * (log_sum / BLEU_MAX_N as f64).exp()
}

/// Search state for the chunk-minimizing alignment.
struct ChunkSearch<'a> {
    hyp: &'a [u32],
    /// Ref positions of each hypothesis token's word, in ascending order.
    ref_positions: HashMap<u32, Vec<usize>>,
    /// How many occurrences of each word still have to be matched.
    needed: HashMap<u32, usize>,
    /// Hypothesis-suffix occurrence counts per word, for feasibility pruning.
    suffix: Vec<HashMap<u32, usize>>,
    ref_used: Vec<bool>,
    best: usize,
    nodes: usize,
}

const CHUNK_SEARCH_BUDGET: usize = 200_000;

impl ChunkSearch<'_> {
    /// Depth-first over hypothesis positions. `prev_ref` is the reference
    /// index matched at the immediately preceding hypothesis position (chunks
    /// extend exactly when consecutive hypothesis tokens map to consecutive
    /// reference positions).
    fn run(&mut self, i: usize, prev_ref: Option<usize>, chunks: usize) {
        if chunks >= self.best {
            return; // cannot improve
        }
        if i == self.hyp.len() {
            self.best = chunks;
            return;
        }
        self.nodes += 1;
        if self.nodes > CHUNK_SEARCH_BUDGET {
            return;
        }
        let w = self.hyp[i];
        let need = self.needed.get(&w).copied().unwrap_or(0);
        if need > 0 {
            let positions = self.ref_positions[&w].clone();
            for rp in positions {
                if self.ref_used[rp] {
                    continue;
                }
                let extends = prev_ref == Some(rp.wrapping_sub(1)) && rp > 0;
                let new_chunks = if extends { chunks } else { chunks + 1 };
                self.ref_used[rp] = true;
                *self.needed.get_mut(&w).unwrap() -= 1;
                self.run(i + 1, Some(rp), new_chunks);
                *self.needed.get_mut(&w).unwrap() += 1;
                self.ref_used[rp] = false;
            }
        }
        // Skipping this occurrence is allowed only if the rest of the
        // hypothesis still holds enough copies of the word.
        let available_later = self.suffix[i + 1].get(&w).copied().unwrap_or(0);
        if available_later >= need {
            self.run(i + 1, None, chunks);
        }
    }
}

/// Minimum chunk count over all maximal exact alignments. `matches` must be
/// the maximal match count (sum of per-word minimum occurrence counts).
fn min_chunks(hypothesis: &[u32], reference: &[u32], matches: usize) -> usize {
    if matches == 0 {
        return 0;
    }
    let h_counts = counts(hypothesis);
    let r_counts = counts(reference);
    let mut ref_positions: HashMap<u32, Vec<usize>> = HashMap::new();
    for (j, &w) in reference.iter().enumerate() {
        ref_positions.entry(w).or_default().push(j);
    }
    let needed: HashMap<u32, usize> = h_counts
        .iter()
        .filter_map(|(&w, &c)| {
            let m = c.min(r_counts.get(&w).copied().unwrap_or(0));
            (m > 0).then_some((w, m))
        })
        .collect();
    let mut suffix = vec![HashMap::new(); hypothesis.len() + 1];
    for i in (0..hypothesis.len()).rev() {
        suffix[i] = suffix[i + 1].clone();
        *suffix[i].entry(hypothesis[i]).or_insert(0) += 1;
    }
    let mut search = ChunkSearch {
        hyp: hypothesis,
        ref_positions,
        needed,
        suffix,
        ref_used: vec![false; reference.len()],
        best: matches + 1, // worst case: every match its own chunk, +1 sentinel
        nodes: 0,
    };
    search.run(0, None, 0);
    search.best.min(matches)
}

/// Exact-match METEOR: unigram alignment maximizing matches then minimizing
/// chunks; F_mean = 10PR/(R + 9P); penalty 0.5·(chunks/matches)³. No stem or
/// synonym matching, so scores are not comparable to WordNet METEOR.
pub fn meteor_exact(hypothesis: &[u32], reference: &[u32]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let h = counts(hypothesis);
    let r = counts(reference);
    let matches: usize = h
        .iter()
        .map(|(tok, &c)| c.min(r.get(tok).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        return 0.0;
    }
    let chunks = min_chunks(hypothesis, reference, matches);
    let p = matches as f64 / hypothesis.len() as f64;
    let rec = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// How much of the preference content the generation reproduced: matched
/// counts of mask-marked target tokens found anywhere in the generation
/// (order-free, multiset-clipped), over the number of marked tokens.
/// Returns (matched, marked) so callers can micro-average.
pub fn pref_token_counts(generated: &[u32], target: &[u32], mask: &[bool]) -> (usize, usize) {
    debug_assert_eq!(target.len(), mask.len());
    let mut wanted: HashMap<u32, usize> = HashMap::new();
    for (&tok, &m) in target.iter().zip(mask) {
        if m {
            *wanted.entry(tok).or_insert(0) += 1;
        }
    }
    let marked: usize = wanted.values().sum();
    let got = counts(generated);
    let matched = wanted
        .iter()
        .map(|(tok, &c)| c.min(got.get(tok).copied().unwrap_or(0)))
        .sum();
    (matched, marked)
}

/// Corpus-mean metric scores. ROUGE and METEOR live in [0, 1], BLEU in
/// [0, 100]. `pref_recall` is the micro-averaged preference-token recall,
/// present only when every scored sample carries a mask.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MetricScores {
    pub rouge1_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rougel_f: f64,
    pub meteor: f64,
    pub bleu: f64,
    pub pref_recall: Option<f64>,
}

/// One evaluated sample: its greedy generation scored against its target.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SampleEval {
    pub user_id: String,
    pub rouge1_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rougel_f: f64,
    pub meteor: f64,
    pub bleu: f64,
    pub pref_matched: Option<usize>,
    pub pref_marked: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub mean: MetricScores,
    pub rows: Vec<SampleEval>,
}

/// Greedy-decodes every sample (at most as many tokens as its target) and
/// scores the generations against the targets, averaging per metric.
pub fn evaluate_corpus<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[Sample],
    with_history: bool,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus("empty evaluation set".into()));
    }
    let dims = params.dims();
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let packed = pack_context(sample, with_history, dims.vocab_size, dims.max_seq)?;
        let generated = greedy_decode(params, packed.prompt(), sample.target.len())?;
        let target = &sample.target;
        let (pref_matched, pref_marked) = match &sample.pref_mask {
            Some(mask) => {
                let (m, n) = pref_token_counts(&generated, target, mask);
                (Some(m), Some(n))
            }
            None => (None, None),
        };
        rows.push(SampleEval {
            user_id: sample.user_id.clone(),
            rouge1_f: rouge_1(&generated, target).f1,
            rougel_f: rouge_l(&generated, target).f1,
            meteor: meteor_exact(&generated, target),
            bleu: bleu(&generated, target),
            pref_matched,
            pref_marked,
        });
    }
    let n = rows.len() as f64;
    let mean_of = |f: fn(&SampleEval) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let pref_recall = if rows.iter().all(|r| r.pref_marked.is_some()) {
        let marked: usize = rows.iter().map(|r| r.pref_marked.unwrap()).sum();
        let matched: usize = rows.iter().map(|r| r.pref_matched.unwrap()).sum();
        (marked > 0).then(|| matched as f64 / marked as f64)
    } else {
        None
    };
    Ok(EvalReport {
        mean: MetricScores {
            rouge1_f: mean_of(|r| r.rouge1_f),
            rougel_f: mean_of(|r| r.rougel_f),
            meteor: mean_of(|r| r.meteor),
            bleu: mean_of(|r| r.bleu),
            pref_recall,
        },
        rows,
    })
}

impl EvalReport {
    /// CSV with one row per sample plus a `mean` summary row.
    pub fn to_csv(&self) -> String {
        use crate::causal::fmt_f64 as f;
        let mut out = String::from("user_id,rouge1_f,rougeL_f,meteor,bleu,pref_recall\n");
        let opt = |r: &SampleEval| match (r.pref_matched, r.pref_marked) {
            (Some(m), Some(n)) if n > 0 => f(m as f64 / n as f64),
            (Some(_), Some(_)) => String::new(),
            _ => String::new(),
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.user_id,
                f(r.rouge1_f),
                f(r.rougel_f),
                f(r.meteor),
                f(r.bleu),
                opt(r)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{},{}\n",
            f(self.mean.rouge1_f),
            f(self.mean.rougel_f),
            f(self.mean.meteor),
            f(self.mean.bleu),
            self.mean.pref_recall.map(f).unwrap_or_default()
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Small word table so token-level tests stay readable.
    fn toks(s: &str) -> Vec<u32> {
        const WORDS: &[&str] = &[
            "the", "cat", "sat", "slept", "on", "mat", "was", "a", "b", "c", "d", "dog",
        ];
        s.split_whitespace()
            .map(|w| WORDS.iter().position(|&x| x == w).expect("word in table") as u32)
            .collect()
    }

    #[test]
    fn rouge1_hand_example_and_identity() {
        let s = rouge_1(&toks("the cat sat"), &toks("the cat slept"));
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);

        let id = rouge_1(&toks("the cat sat"), &toks("the cat sat"));
        assert_eq!(id.f1, 1.0);
        assert_eq!(rouge_1(&[], &toks("the cat")).f1, 0.0);
        assert_eq!(rouge_1(&toks("the cat"), &[]).f1, 0.0);
    }

    #[test]
    fn rouge1_clips_repeated_unigrams() {
        // "the the the the" vs "the cat": overlap clipped to 1.
        let s = rouge_1(&toks("the the the the"), &toks("the cat"));
        assert!((s.precision - 0.25).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_hand_example_via_lcs() {
        let s = rouge_l(&toks("the cat sat"), &toks("the cat slept"));
        // LCS = "the cat", length 2 of 3.
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("the cat"), &toks("the cat")).f1, 1.0);
        assert_eq!(rouge_l(&toks("a b c"), &toks("the cat")).f1, 0.0);
    }

    #[test]
    fn rouge_l_is_order_sensitive_where_rouge1_is_not() {
        let hyp = toks("cat the");
        let reference = toks("the cat");
        let r1 = rouge_1(&hyp, &reference);
        let rl = rouge_l(&hyp, &reference);
        assert_eq!(r1.f1, 1.0);
        assert!((rl.f1 - 0.5).abs() < 1e-12);
        assert!(r1.f1 > rl.f1);
    }

    #[test]
    fn bleu_degenerate_hypothesis_matches_independent_oracle() {
        let score = bleu(&toks("the the the the"), &toks("the cat"));
        assert!((score - 31.94715521231363).abs() < 1e-6, "got {score}");
    }

    #[test]
    fn bleu_identity_and_empty_cases() {
        assert_eq!(bleu(&toks("the cat sat on the mat"), &toks("the cat sat on the mat")), 100.0);
        // Short identity: higher orders have no n-grams and smooth to 1.
        assert!((bleu(&toks("the cat"), &toks("the cat")) - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&[], &toks("the cat")), 0.0);
        assert_eq!(bleu(&toks("the cat"), &[]), 0.0);
        // Disjoint unigrams: no smoothing at n=1, exact zero.
        assert_eq!(bleu(&toks("a b c"), &toks("the cat")), 0.0);
    }

    #[test]
    fn bleu_prefix_brevity_penalty_matches_oracle_and_never_decreases() {
        let reference = toks("the cat sat on");
        let score2 = bleu(&toks("the cat"), &reference);
        assert!((score2 - 36.787944117144235).abs() < 1e-6, "got {score2}");
        // Extending a strict prefix of the reference: the brevity penalty
        // factor exp(1 - |ref|/|hyp|) is nondecreasing in |hyp|.
        let mut last_bp = 0.0;
        for k in 1..=4 {
            let hyp = &reference[..k];
            let bp = if hyp.len() >= reference.len() {
                1.0
            } else {
                (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
            };
            assert!(bp >= last_bp);
            last_bp = bp;
            assert_eq!(bleu(hyp, &reference) > 0.0, true);
        }
    }

    #[test]
    fn meteor_hand_example_matches_independent_oracle() {
        let score = meteor_exact(&toks("the cat sat on the mat"), &toks("the cat was on the mat"));
        // matches 5, chunks 2 → F_mean 5/6, penalty 0.5·(2/5)³.
        assert!((score - 0.8066666666666666).abs() < 1e-6, "got {score}");
    }

    #[test]
    fn meteor_identity_and_no_match_cases() {
        let id3 = meteor_exact(&toks("the cat sat"), &toks("the cat sat"));
        assert!((id3 - 0.9814814814814815).abs() < 1e-12, "got {id3}");
        assert_eq!(meteor_exact(&toks("a b c"), &toks("the cat")), 0.0);
        assert_eq!(meteor_exact(&[], &toks("the cat")), 0.0);
    }

    #[test]
    fn meteor_chunk_minimization_prefers_contiguous_alignments() {
        // hyp "the cat the" vs ref "the the cat": both "the" occurrences
        // match; a careless alignment yields 3 chunks, the optimum is 2:
        // hyp[0]→ref[1], hyp[1]→ref[2] (one chunk), hyp[2]→ref[0].
        let hyp = toks("the cat the");
        let reference = toks("the the cat");
        assert_eq!(min_chunks(&hyp, &reference, 3), 2);

        // Fully contiguous: one chunk.
        assert_eq!(min_chunks(&toks("the cat"), &toks("the cat"), 2), 1);
        // Reversal: every match is its own chunk.
        assert_eq!(min_chunks(&toks("cat the"), &toks("the cat"), 2), 2);
    }

    #[test]
    fn pref_token_counts_clip_by_multiplicity() {
        let target = toks("the cat sat");
        let mask = [true, true, false];
        // Generation contains "cat" once and "the" twice; only one "the" is
        // marked, so matched = 2 of 2.
        let (m, n) = pref_token_counts(&toks("the the cat"), &target, &mask);
        assert_eq!((m, n), (2, 2));
        // Missing "cat" entirely: 1 of 2.
        let (m, n) = pref_token_counts(&toks("the dog"), &target, &mask);
        assert_eq!((m, n), (1, 2));
        // Nothing marked.
        let (m, n) = pref_token_counts(&toks("the"), &target, &[false, false, false]);
        assert_eq!((m, n), (0, 0));
    }

    #[test]
    fn evaluate_corpus_averages_and_rejects_empty_sets() {
        use crate::model::ModelDims;
        let dims = ModelDims { vocab_size: 32, d_model: 16, n_layers: 1, n_heads: 2, max_seq: 48 };
        let params = ModelParams::<f64>::init(dims, 3).unwrap();
        let samples = vec![
            Sample {
                user_id: "u0".into(),
                query: vec![5, 6],
                history: vec![vec![7, 8]],
                target: vec![9, 10, 11],
                pref_mask: Some(vec![true, false, true]),
            },
            Sample {
                user_id: "u1".into(),
                query: vec![12],
                history: vec![],
                target: vec![13, 14],
                pref_mask: Some(vec![false, true]),
            },
        ];
        let report = evaluate_corpus(&params, &samples, true).unwrap();
        assert_eq!(report.rows.len(), 2);
        let expected = (report.rows[0].rouge1_f + report.rows[1].rouge1_f) / 2.0;
        assert!((report.mean.rouge1_f - expected).abs() < 1e-15);
        assert!(report.mean.pref_recall.is_some());

        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 4); // header + 2 samples + mean
        assert!(lines[0].starts_with("user_id,rouge1_f,rougeL_f,meteor,bleu"));
        assert!(lines[3].starts_with("mean,"));

        assert!(matches!(
            evaluate_corpus(&params, &[], true),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn perfect_reproduction_maximizes_every_metric() {
        // Simulate a verbatim model by scoring targets against themselves.
        let target = toks("the cat sat on the mat");
        assert_eq!(rouge_1(&target, &target).f1, 1.0);
        assert_eq!(rouge_l(&target, &target).f1, 1.0);
        assert_eq!(bleu(&target, &target), 100.0);
        let m = meteor_exact(&target, &target);
        assert!((m - (1.0 - 0.5 / 216.0)).abs() < 1e-12); // 6 matches, 1 chunk
    }
}
