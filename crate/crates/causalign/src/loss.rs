//! Training objectives: the preference-weighted token cross-entropy, the
//! causal preference loss on the logit difference between a with-history and
//! a history-ablated pass, and their weighted combination.

use crate::error::{Error, Result};
use crate::mat::{softmax_in_place, Mat};
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before the log so a zero never
/// produces an infinite loss; one term saturates at −ln(1e-12) ≈ 27.63.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_lens(op: &'static str, rows: usize, targets: &[u32], weights: &[f64], cols: usize) -> Result<()> {
    if targets.len() != rows || weights.len() != rows {
        return Err(Error::ShapeMismatch {
            op,
            details: format!(
                "{rows} positions, {} targets, {} weights",
                targets.len(),
                weights.len()
            ),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cols) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab_size: cols,
        });
    }
    if let Some(&bad) = weights.iter().find(|&&w| !(w.is_finite() && w >= 0.0)) {
        return Err(Error::ShapeMismatch {
            op,
            details: format!("token weight {bad} is not a finite non-negative number"),
        });
    }
    Ok(())
}

fn clamped_nll<T: Scalar>(p: T) -> T {
    let floor = T::from_f64(PROB_FLOOR);
    -(p.max(floor)).ln()
}

/// Weighted token cross-entropy: Σ_t ω_t · (−ln p_t(y_t)) over one sample's
/// target positions. `probs` holds one probability row per target position.
/// Returns the summed loss and the per-token terms.
pub fn weighted_normal_loss<T: Scalar>(
    probs: &Mat<T>,
    targets: &[u32],
    weights: &[f64],
) -> Result<(T, Vec<T>)> {
    check_lens("weighted_normal_loss", probs.rows(), targets, weights, probs.cols())?;
    let mut terms = Vec::with_capacity(targets.len());
    let mut total = T::zero();
    for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
        let term = T::from_f64(w) * clamped_nll(probs.get(t, y as usize));
        terms.push(term);
        total += term;
    }
    Ok((total, terms))
}

/// Row-wise softmax over the logit difference z_with − z_without. These are
/// the distributions the causal preference loss scores; the trainer reuses
/// them when seeding gradients.
pub fn preference_softmax_rows<T: Scalar>(
    logits_with: &Mat<T>,
    logits_without: &Mat<T>,
) -> Result<Mat<T>> {
    if logits_with.rows() != logits_without.rows() || logits_with.cols() != logits_without.cols() {
        return Err(Error::ShapeMismatch {
            op: "preference_softmax_rows",
            details: format!(
                "{}x{} vs {}x{}",
                logits_with.rows(),
                logits_with.cols(),
                logits_without.rows(),
                logits_without.cols()
            ),
        });
    }
    let mut diff = Mat::zeros(logits_with.rows(), logits_with.cols());
    for r in 0..diff.rows() {
        let (w, o) = (logits_with.row(r), logits_without.row(r));
        let row = diff.row_mut(r);
        for c in 0..row.len() {
            row[c] = w[c] - o[c];
        }
        softmax_in_place(row);
    }
    Ok(diff)
}

/// Causal preference loss for one sample: cross-entropy of the target under
/// softmax(z_with − z_without), weighted per token. Aligned rows must
/// correspond to the same target position in both passes.
pub fn causal_preference_loss<T: Scalar>(
    logits_with: &Mat<T>,
    logits_without: &Mat<T>,
    targets: &[u32],
    weights: &[f64],
) -> Result<(T, Vec<T>)> {
    let q = preference_softmax_rows(logits_with, logits_without)?;
    check_lens("causal_preference_loss", q.rows(), targets, weights, q.cols())?;
    let mut terms = Vec::with_capacity(targets.len());
    let mut total = T::zero();
    for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
        let term = T::from_f64(w) * clamped_nll(q.get(t, y as usize));
        terms.push(term);
        total += term;
    }
    Ok((total, terms))
}

/// Diagnostic probability-space variant: scores the target under the
/// floored, renormalized difference of probability rows. Not used in
/// training; kept for comparing the two readings of the preference signal.
pub fn prob_diff_preference_loss<T: Scalar>(
    probs_with: &Mat<T>,
    probs_without: &Mat<T>,
    targets: &[u32],
    weights: &[f64],
) -> Result<(T, Vec<T>)> {
    if probs_with.rows() != probs_without.rows() || probs_with.cols() != probs_without.cols() {
        return Err(Error::ShapeMismatch {
            op: "prob_diff_preference_loss",
            details: format!(
                "{}x{} vs {}x{}",
                probs_with.rows(),
                probs_with.cols(),
                probs_without.rows(),
                probs_without.cols()
            ),
        });
    }
    check_lens(
        "prob_diff_preference_loss",
        probs_with.rows(),
        targets,
        weights,
        probs_with.cols(),
    )?;
    let floor = T::from_f64(PROB_FLOOR);
    let mut terms = Vec::with_capacity(targets.len());
    let mut total = T::zero();
    for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
        let (pw, po) = (probs_with.row(t), probs_without.row(t));
        let mut sum = T::zero();
        let mut at_target = T::zero();
        for c in 0..pw.len() {
            let v = (pw[c] - po[c]).max(floor);
            sum += v;
            if c == y as usize {
                at_target = v;
            }
        }
        let term = T::from_f64(w) * clamped_nll(at_target / sum);
        terms.push(term);
        total += term;
    }
    Ok((total, terms))
}

/// Combined objective: L = L_n + α · L_p.
pub fn total_loss(l_n: f64, l_p: f64, alpha: f64) -> f64 {
    l_n + alpha * l_p
}

/// Batch-level loss report. `l_n` and `l_p` are means over the batch of the
/// per-sample summed token terms; the per-token vectors keep one entry per
/// target position of each sample (`per_token_p` is empty when α = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_n: f64,
    pub l_p: f64,
    pub total: f64,
    pub alpha: f64,
    pub per_token_n: Vec<Vec<f64>>,
    pub per_token_p: Vec<Vec<f64>>,
}

impl LossBreakdown {
    pub fn from_terms(
        alpha: f64,
        per_token_n: Vec<Vec<f64>>,
        per_token_p: Vec<Vec<f64>>,
    ) -> LossBreakdown {
        assert!(
            !per_token_n.is_empty(),
            "a loss breakdown needs at least one sample"
        );
        let n = per_token_n.len() as f64;
        let l_n = per_token_n.iter().map(|s| s.iter().sum::<f64>()).sum::<f64>() / n;
        let l_p = if per_token_p.is_empty() {
            0.0
        } else {
            per_token_p.iter().map(|s| s.iter().sum::<f64>()).sum::<f64>() / n
        };
        LossBreakdown {
            l_n,
            l_p,
            total: total_loss(l_n, l_p, alpha),
            alpha,
            per_token_n,
            per_token_p,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn weighted_normal_loss_matches_hand_oracle() {
        // Two positions: p(y) = 0.5 with ω = 0.9, p(y) = 0.25 with ω = 0.1.
        // Loss = 0.9·ln 2 + 0.1·ln 4 = 0.762461898615940.
        let probs = Mat::from_vec(2, 2, vec![0.5f64, 0.5, 0.75, 0.25]);
        let (loss, terms) = weighted_normal_loss(&probs, &[0, 1], &[0.9, 0.1]).unwrap();
        assert!((loss - 0.7624618986159399).abs() < 1e-9);
        assert_eq!(terms.len(), 2);
        assert!((terms[0] - 0.9 * 2.0f64.ln()).abs() < 1e-12);
        assert!((terms[1] - 0.1 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped_not_infinite() {
        let probs = Mat::from_vec(1, 2, vec![0.0f64, 1.0]);
        let (loss, _) = weighted_normal_loss(&probs, &[0], &[1.0]).unwrap();
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!((loss - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_zeroes_the_term() {
        let probs = Mat::from_vec(1, 2, vec![0.0f64, 1.0]);
        let (loss, _) = weighted_normal_loss(&probs, &[0], &[0.0]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn causal_preference_loss_matches_hand_oracle() {
        // V = 3, z_with − z_without = (1, 0, 0), target 0, ω = 1.
        // softmax gives e/(e+2); −ln of that = ln(e+2) − 1 = 0.551444713932051.
        let with = Mat::from_vec(1, 3, vec![2.0f64, 1.5, 0.25]);
        let without = Mat::from_vec(1, 3, vec![1.0f64, 1.5, 0.25]);
        let (loss, _) = causal_preference_loss(&with, &without, &[0], &[1.0]).unwrap();
        assert!((loss - 0.5514447139320511).abs() < 1e-9);
    }

    #[test]
    fn identical_passes_give_uniform_preference_distribution() {
        // z_with = z_without → difference 0 → softmax uniform → loss ln V.
        let v = 7usize;
        let logits = Mat::from_fn(3, v, |r, c| ((r * v + c) as f64 * 0.13).sin());
        let (loss, terms) =
            causal_preference_loss(&logits, &logits, &[3, 0, 6], &[1.0, 1.0, 1.0]).unwrap();
        let ln_v = (v as f64).ln();
        assert!((loss - 3.0 * ln_v).abs() < 1e-9);
        for t in terms {
            assert!((t - ln_v).abs() < 1e-9);
        }
    }

    #[test]
    fn preference_loss_is_shift_invariant_per_row() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let v = 11usize;
        for _ in 0..20 {
            let with: Mat<f64> = Mat::from_fn(2, v, |_, _| rng.gen_range(-3.0..3.0));
            let without = Mat::from_fn(2, v, |_, _| rng.gen_range(-3.0..3.0));
            let (base, _) = causal_preference_loss(&with, &without, &[1, 9], &[0.9, 0.1]).unwrap();
            // Shift every with-logit row by its own constant; the difference
            // softmax is unchanged up to that shift's cancellation in softmax.
            let shift = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            let shifted = Mat::from_fn(2, v, |r, c| with.get(r, c) + shift[r]);
            let (moved, _) =
                causal_preference_loss(&shifted, &without, &[1, 9], &[0.9, 0.1]).unwrap();
            assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
        }
    }

    #[test]
    fn losses_scale_linearly_in_the_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let probs: Mat<f64> = Mat::from_fn(3, 5, |_, _| rng.gen_range(0.01..1.0));
        let targets = [0u32, 2, 4];
        let w1 = [0.3, 0.7, 1.0];
        let w2: Vec<f64> = w1.iter().map(|w| w * 2.5).collect();
        let (a, _) = weighted_normal_loss(&probs, &targets, &w1).unwrap();
        let (b, _) = weighted_normal_loss(&probs, &targets, &w2).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-12);
    }

    #[test]
    fn shape_and_target_validation() {
        let probs = Mat::from_vec(1, 2, vec![0.5f64, 0.5]);
        assert!(weighted_normal_loss(&probs, &[0, 1], &[1.0, 1.0]).is_err());
        assert!(weighted_normal_loss(&probs, &[5], &[1.0]).is_err());
        assert!(weighted_normal_loss(&probs, &[0], &[-1.0]).is_err());
        let other = Mat::from_vec(2, 2, vec![0.5f64, 0.5, 0.5, 0.5]);
        assert!(causal_preference_loss(&probs, &other, &[0], &[1.0]).is_err());
    }

    #[test]
    fn total_loss_is_the_affine_combination() {
        assert_eq!(total_loss(2.0, 3.0, 0.05), 2.15);
        assert_eq!(total_loss(1.0, 100.0, 0.0), 1.0);
    }

    #[test]
    fn breakdown_reduces_terms_to_batch_means() {
        let b = LossBreakdown::from_terms(
            0.5,
            vec![vec![1.0, 2.0], vec![3.0]],
            vec![vec![0.5], vec![1.5]],
        );
        assert_eq!(b.l_n, 3.0);
        assert_eq!(b.l_p, 1.0);
        assert_eq!(b.total, 3.5);
        let no_p = LossBreakdown::from_terms(0.5, vec![vec![2.0]], vec![]);
        assert_eq!(no_p.l_p, 0.0);
        assert_eq!(no_p.total, 2.0);
    }

    #[test]
    fn prob_diff_diagnostic_degenerates_to_uniform_on_identical_passes() {
        let v = 6usize;
        let probs = Mat::from_fn(2, v, |_, c| 1.0 / v as f64 + (c as f64 - 2.5) * 1e-3);
        let (loss, _) =
            prob_diff_preference_loss(&probs, &probs, &[0, 5], &[1.0, 1.0]).unwrap();
        assert!((loss - 2.0 * (v as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn prob_diff_diagnostic_rewards_history_gains() {
        let with = Mat::from_vec(1, 2, vec![0.8f64, 0.2]);
        let without = Mat::from_vec(1, 2, vec![0.5f64, 0.5]);
        // Target gained probability from history → near-zero loss.
        let (gain, _) = prob_diff_preference_loss(&with, &without, &[0], &[1.0]).unwrap();
        assert!(gain < 1e-9);
        // Target lost probability → clamped, heavily penalized.
        let (lost, _) = prob_diff_preference_loss(&with, &without, &[1], &[1.0]).unwrap();
        assert!(lost > 20.0);
    }
}
