//! The training engine: variants of the objective, exact reverse-mode
//! gradients through the traced forward pass, AdamW, the epoch loop, and a
//! finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::causal::TokenWeights;
use crate::corpus::{pack_context, Sample};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, PROB_FLOOR};
use crate::mat::{softmax_in_place, Mat};
use crate::model::{
    forward_trace, gelu_prime, ForwardTrace, Gradients, LnTrace, ModelParams,
};
use crate::scalar::Scalar;
use crate::util::derive_seed;

/// The five training variants. They differ only in which loss terms are
/// active and whether the personal history is visible during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Supervised fine-tuning with the history stripped from every context.
    NoHistorySft,
    /// Plain fine-tuning on full contexts: uniform weights, no pairwise term.
    Base,
    /// Uniform weights plus the history-contrast term.
    CausalOnly,
    /// Thresholded per-token weights on the likelihood term only.
    NormOnly,
    /// Thresholded weights and the history-contrast term together.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NoHistorySft,
        Variant::Base,
        Variant::CausalOnly,
        Variant::NormOnly,
        Variant::Full,
    ];

    /// Whether the likelihood term uses the precomputed thresholded weights
    /// (otherwise every token counts with weight 1).
    pub fn uses_preference_weights(self) -> bool {
        matches!(self, Variant::NormOnly | Variant::Full)
    }

    /// Whether the history-contrast term is part of the objective, which
    /// requires the second, history-ablated forward pass.
    pub fn uses_preference_loss(self) -> bool {
        matches!(self, Variant::CausalOnly | Variant::Full)
    }

    /// Whether training contexts are packed without the history.
    pub fn strips_history(self) -> bool {
        matches!(self, Variant::NoHistorySft)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::NoHistorySft => "no_history_sft",
            Variant::Base => "base",
            Variant::CausalOnly => "causal_only",
            Variant::NormOnly => "norm_only",
            Variant::Full => "full",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "no_history_sft" => Ok(Variant::NoHistorySft),
            "base" => Ok(Variant::Base),
            "causal_only" => Ok(Variant::CausalOnly),
            "norm_only" => Ok(Variant::NormOnly),
            "full" => Ok(Variant::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant {other:?}; expected one of no_history_sft, base, causal_only, norm_only, full"
            ))),
        }
    }
}

/// Everything one training run needs beyond the data and the models.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Coefficient on the history-contrast term.
    pub alpha: f64,
    /// Effect-score threshold for the token weights.
    pub delta: f64,
    /// Weight for tokens whose score exceeds the threshold.
    pub lambda: f64,
    /// Weight for all other tokens.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            alpha: 0.05,
            delta: 0.05,
            lambda: 0.9,
            epsilon: 0.1,
            learning_rate: 3e-4,
            weight_decay: 0.025,
            dropout: 0.05,
            epochs: 5,
            batch_size: 8,
            grad_clip: Some(1.0),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.variant.uses_preference_loss() && self.alpha == 0.0 {
            return bad(format!(
                "variant {} requires alpha > 0; use base or norm_only for alpha = 0",
                self.variant
            ));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad(format!("delta must lie in [0, 1), got {}", self.delta));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= self.lambda) {
            return bad(format!(
                "epsilon must lie in (0, lambda], got {} with lambda {}",
                self.epsilon, self.lambda
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// α as the objective sees it: zero unless the variant carries the
    /// history-contrast term.
    pub fn effective_alpha(&self) -> f64 {
        if self.variant.uses_preference_loss() {
            self.alpha
        } else {
            0.0
        }
    }

    /// Dropout as training applies it: forced off whenever the objective
    /// compares two passes, which must see identical noise-free activations.
    pub fn effective_dropout(&self) -> f64 {
        if self.variant.uses_preference_loss() {
            0.0
        } else {
            self.dropout
        }
    }
}

/// Layer-norm backward. `dy` is the gradient at the LN output; returns the
/// gradient at the LN input and accumulates the gain/bias gradients.
fn ln_backward<T: Scalar>(
    dy: &Mat<T>,
    ln: &LnTrace<T>,
    gain: &Mat<T>,
    dgain: &mut Mat<T>,
    dbias: &mut Mat<T>,
) -> Mat<T> {
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Mat::zeros(rows, cols);
    let inv_d = T::from_f64(1.0 / cols as f64);
    let g = gain.row(0);
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = ln.xhat.row(r);
        let rstd = ln.rstd[r];
        let dg = dgain.row_mut(0);
        let db = dbias.row_mut(0);
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..cols {
            let dxhat = dyr[c] * g[c];
            m1 += dxhat;
            m2 += dxhat * xh[c];
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dxr = dx.row_mut(r);
        for c in 0..cols {
            let dxhat = dyr[c] * g[c];
            dxr[c] = rstd * (dxhat - m1 - xh[c] * m2);
        }
    }
    dx
}

/// Adds the column sums of `m` into a 1×cols bias gradient.
fn add_col_sums<T: Scalar>(m: &Mat<T>, dbias: &mut Mat<T>) {
    debug_assert_eq!(dbias.cols(), m.cols());
    let db = dbias.row_mut(0);
    for r in 0..m.rows() {
        for (acc, &v) in db.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
}

fn masked_copy<T: Scalar>(m: &Mat<T>, mask: &Option<Vec<T>>) -> Mat<T> {
    let mut out = m.clone();
    if let Some(mask) = mask {
        for (v, &s) in out.iter_mut().zip(mask) {
            *v *= s;
        }
    }
    out
}

/// Exact reverse-mode pass: given the gradient of the loss with respect to
/// the logits of one traced forward pass, accumulates the gradients of every
/// parameter into `grads`.
pub(crate) fn backward<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    dlogits: &Mat<T>,
    grads: &mut Gradients<T>,
) {
    let dims = params.dims();
    let d = dims.d_model;
    let n_heads = dims.n_heads;
    let hd = dims.head_dim();
    let t_len = trace.ids.len();
    let one = T::one();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    // logits = final_normed · wteᵀ (tied embedding head)
    Mat::gemm_into(&mut grads.wte, one, dlogits, true, &trace.final_normed, false, one);
    let d_final_normed = dlogits.matmul(&params.wte);

    let mut dx = ln_backward(
        &d_final_normed,
        &trace.lnf,
        &params.lnf_gain,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
    );

    for (li, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let gl = &mut grads.layers[li];

        // x_out = x_mid + mask ⊙ (gelu(ln2_out·w1 + b1)·w2 + b2)
        let d_mlp = masked_copy(&dx, &lt.mlp_mask);
        Mat::gemm_into(&mut gl.w2, one, &lt.h_act, true, &d_mlp, false, one);
        add_col_sums(&d_mlp, &mut gl.b2);
        let mut d_h = d_mlp.matmul_nt(&lp.w2);
        for (g, &pre) in d_h.iter_mut().zip(lt.h_pre.iter()) {
            *g *= gelu_prime(pre);
        }
        Mat::gemm_into(&mut gl.w1, one, &lt.ln2_out, true, &d_h, false, one);
        add_col_sums(&d_h, &mut gl.b1);
        let d_ln2_out = d_h.matmul_nt(&lp.w1);
        let d_branch = ln_backward(&d_ln2_out, &lt.ln2, &lp.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);
        dx.add_assign(&d_branch);

        // x_mid = x_in + mask ⊙ (ho·wo)
        let d_attn = masked_copy(&dx, &lt.attn_mask);
        Mat::gemm_into(&mut gl.wo, one, &lt.ho, true, &d_attn, false, one);
        let d_ho = d_attn.matmul_nt(&lp.wo);

        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        for h in 0..n_heads {
            let off = h * hd;
            let probs = &lt.attn_probs[h];

            // dV_h += probsᵀ · d_ho_h
            T::gemm(
                t_len, t_len, hd,
                one,
                probs.as_slice(), 1, t_len as isize,
                &d_ho.as_slice()[off..], d as isize, 1,
                one,
                &mut dv.as_mut_slice()[off..], d as isize, 1,
            );
            // d_probs = d_ho_h · V_hᵀ
            let mut d_probs = Mat::zeros(t_len, t_len);
            T::gemm(
                t_len, hd, t_len,
                one,
                &d_ho.as_slice()[off..], d as isize, 1,
                &lt.v.as_slice()[off..], 1, d as isize,
                T::zero(),
                d_probs.as_mut_slice(), t_len as isize, 1,
            );
            // Causal softmax backward, row by row over the visible prefix.
            let mut d_scores = Mat::zeros(t_len, t_len);
            for i in 0..t_len {
                let p = &probs.row(i)[..=i];
                let dp = &d_probs.row(i)[..=i];
                let dot = p.iter().zip(dp).map(|(&a, &b)| a * b).sum::<T>();
                let ds = d_scores.row_mut(i);
                for j in 0..=i {
                    ds[j] = p[j] * (dp[j] - dot);
                }
            }
            // scores = scale · Q_h K_hᵀ
            T::gemm(
                t_len, t_len, hd,
                scale,
                d_scores.as_slice(), t_len as isize, 1,
                &lt.k.as_slice()[off..], d as isize, 1,
                one,
                &mut dq.as_mut_slice()[off..], d as isize, 1,
            );
            T::gemm(
                t_len, t_len, hd,
                scale,
                d_scores.as_slice(), 1, t_len as isize,
                &lt.q.as_slice()[off..], d as isize, 1,
                one,
                &mut dk.as_mut_slice()[off..], d as isize, 1,
            );
        }

        Mat::gemm_into(&mut gl.wq, one, &lt.ln1_out, true, &dq, false, one);
        Mat::gemm_into(&mut gl.wk, one, &lt.ln1_out, true, &dk, false, one);
        Mat::gemm_into(&mut gl.wv, one, &lt.ln1_out, true, &dv, false, one);
        let mut d_ln1_out = dq.matmul_nt(&lp.wq);
        d_ln1_out.add_assign(&dk.matmul_nt(&lp.wk));
        d_ln1_out.add_assign(&dv.matmul_nt(&lp.wv));
        let d_branch = ln_backward(&d_ln1_out, &lt.ln1, &lp.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
        dx.add_assign(&d_branch);
    }

    // x_0 = mask ⊙ (wte[id] + wpe[pos])
    let d_embed = masked_copy(&dx, &trace.embed_mask);
    for i in 0..t_len {
        let src = d_embed.row(i);
        let te = grads.wte.row_mut(trace.ids[i] as usize);
        for c in 0..d {
            te[c] += src[c];
        }
        let pe = grads.wpe.row_mut(i);
        for c in 0..d {
            pe[c] += src[c];
        }
    }
}

/// Loss and parameter gradients for one batch under a variant's objective.
///
/// The frozen proxy `theta0` receives no gradient; its role here is to vouch
/// for the token weights — when the variant uses them, every sample's weight
/// fingerprint must match `theta0`'s checksum, so weights computed against a
/// different model are rejected rather than silently applied.
///
/// Gradients and the reported losses are means over the batch. `dropout_rng`
/// drives the dropout masks and is only consulted when the effective dropout
/// is non-zero; the history-contrast variants force dropout off because their
/// two passes must agree deterministically.
pub fn loss_and_grads<T: Scalar>(
    theta: &ModelParams<T>,
    theta0: &ModelParams<T>,
    batch: &[&Sample],
    weights: &[&TokenWeights],
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(LossBreakdown, Gradients<T>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyCorpus("cannot take a step on an empty batch".into()));
    }
    let use_weights = cfg.variant.uses_preference_weights();
    if use_weights {
        if weights.len() != batch.len() {
            return Err(Error::ShapeMismatch {
                op: "loss_and_grads",
                details: format!("{} weight sets for {} samples", weights.len(), batch.len()),
            });
        }
        let expected = theta0.checksum();
        for w in weights {
            if w.fingerprint != expected {
                return Err(Error::FingerprintMismatch {
                    what: "token weights",
                    expected,
                    found: w.fingerprint.clone(),
                });
            }
        }
    }
    let use_lp = cfg.variant.uses_preference_loss();
    let alpha = cfg.effective_alpha();
    let with_history = !cfg.variant.strips_history();
    let dims = *theta.dims();
    let dropout_p = cfg.effective_dropout();

    let mut grads = ModelParams::zeros(dims)?;
    let mut per_token_n: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    let mut per_token_p: Vec<Vec<f64>> = Vec::new();
    let floor = T::from_f64(PROB_FLOOR);
    let alpha_t = T::from_f64(alpha);

    for (bi, sample) in batch.iter().enumerate() {
        let n = sample.target.len();
        let w: Vec<f64> = if use_weights {
            weights[bi].weights.clone()
        } else {
            vec![1.0; n]
        };
        if w.len() != n {
            return Err(Error::ShapeMismatch {
                op: "loss_and_grads",
                details: format!(
                    "sample for {} has {} target tokens but {} weights",
                    sample.user_id,
                    n,
                    w.len()
                ),
            });
        }

        let packed = pack_context(sample, with_history, dims.vocab_size, dims.max_seq)?;
        let drop = match &mut dropout_rng {
            Some(rng) if dropout_p > 0.0 => Some((dropout_p, &mut **rng)),
            _ => None,
        };
        let trace = forward_trace(theta, &packed.ids, drop)?;

        // Target-row probabilities from the main pass.
        let mut probs = Mat::zeros(n, dims.vocab_size);
        for (t, r) in packed.target_span.pred_rows().enumerate() {
            probs.row_mut(t).copy_from_slice(trace.logits.row(r));
            softmax_in_place(probs.row_mut(t));
        }
        let (l_n, terms_n) = loss::weighted_normal_loss(&probs, &sample.target, &w)?;
        if !l_n.as_f64().is_finite() {
            return Err(Error::NonFinite {
                what: "likelihood loss",
                user_id: sample.user_id.clone(),
            });
        }
        per_token_n.push(terms_n.iter().map(|v| v.as_f64()).collect());

        // Likelihood seed: ∂L_n/∂z = ω · (softmax(z) − onehot(y)), zero where
        // the probability floor clipped the term.
        let mut dlogits = Mat::zeros(trace.logits.rows(), dims.vocab_size);
        for (t, r) in packed.target_span.pred_rows().enumerate() {
            let y = sample.target[t] as usize;
            if probs.get(t, y) <= floor {
                continue;
            }
            let wt = T::from_f64(w[t]);
            let dst = dlogits.row_mut(r);
            for (g, &p) in dst.iter_mut().zip(probs.row(t)) {
                *g += wt * p;
            }
            dst[y] -= wt;
        }

        if use_lp {
            let packed_null = pack_context(sample, false, dims.vocab_size, dims.max_seq)?;
            let trace_null = forward_trace(theta, &packed_null.ids, None)?;

            let mut z_with = Mat::zeros(n, dims.vocab_size);
            let mut z_without = Mat::zeros(n, dims.vocab_size);
            for (t, r) in packed.target_span.pred_rows().enumerate() {
                z_with.row_mut(t).copy_from_slice(trace.logits.row(r));
            }
            for (t, r) in packed_null.target_span.pred_rows().enumerate() {
                z_without.row_mut(t).copy_from_slice(trace_null.logits.row(r));
            }
            let (l_p, terms_p) =
                loss::causal_preference_loss(&z_with, &z_without, &sample.target, &w)?;
            if !l_p.as_f64().is_finite() {
                return Err(Error::NonFinite {
                    what: "history-contrast loss",
                    user_id: sample.user_id.clone(),
                });
            }
            per_token_p.push(terms_p.iter().map(|v| v.as_f64()).collect());

            // Contrast seed: with q = softmax(z_with − z_without),
            // ∂L_p/∂z_with = αω(q − onehot) and ∂L_p/∂z_without is its
            // negation. Zero where the floor clipped.
            let q = loss::preference_softmax_rows(&z_with, &z_without)?;
            let mut dlogits_null = Mat::zeros(trace_null.logits.rows(), dims.vocab_size);
            let rows_with: Vec<usize> = packed.target_span.pred_rows().collect();
            let rows_null: Vec<usize> = packed_null.target_span.pred_rows().collect();
            for t in 0..n {
                let y = sample.target[t] as usize;
                if q.get(t, y) <= floor {
                    continue;
                }
                let aw = alpha_t * T::from_f64(w[t]);
                let dst_w = dlogits.row_mut(rows_with[t]);
                for (g, &qv) in dst_w.iter_mut().zip(q.row(t)) {
                    *g += aw * qv;
                }
                dst_w[y] -= aw;
                let dst_n = dlogits_null.row_mut(rows_null[t]);
                for (g, &qv) in dst_n.iter_mut().zip(q.row(t)) {
                    *g -= aw * qv;
                }
                dst_n[y] += aw;
            }
            backward(theta, &trace_null, &dlogits_null, &mut grads);
        }

        backward(theta, &trace, &dlogits, &mut grads);
    }

    let inv_b = T::from_f64(1.0 / batch.len() as f64);
    for t in grads.tensors_mut() {
        t.mat.scale(inv_b);
    }
    for t in grads.tensors() {
        if t.mat.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                user_id: batch
                    .iter()
                    .map(|s| s.user_id.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            });
        }
    }

    Ok((LossBreakdown::from_terms(alpha, per_token_n, per_token_p), grads))
}

/// Euclidean norm of all gradient entries, accumulated in f64.
pub fn grad_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    let mut sq = 0.0;
    for t in grads.tensors() {
        for v in t.mat.iter() {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    sq.sqrt()
}

/// Scales the gradient down to `max_norm` when it exceeds it. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for t in grads.tensors_mut() {
            t.mat.scale(s);
        }
    }
    norm
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
pub struct AdamState<T> {
    m: ModelParams<T>,
    v: ModelParams<T>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dims: crate::model::ModelDims) -> Result<Self> {
        Ok(AdamState {
            m: ModelParams::zeros(dims)?,
            v: ModelParams::zeros(dims)?,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update: bias-corrected moment estimates drive the step, and
/// weight decay is applied decoupled from the gradient — and only to the
/// weight matrices, never to layer-norm parameters or biases.
pub fn adamw_step<T: Scalar>(
    theta: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step;
    let lr = T::from_f64(cfg.learning_rate);
    let wd = T::from_f64(cfg.weight_decay);
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
    let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPS);
    let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(t as i32));

    let mut theta_t = theta.tensors_mut();
    let grad_t = grads.tensors();
    let mut m_t = state.m.tensors_mut();
    let mut v_t = state.v.tensors_mut();
    for i in 0..theta_t.len() {
        let decay = theta_t[i].decay;
        let p = theta_t[i].mat.as_mut_slice();
        let g = grad_t[i].mat.as_slice();
        let m = m_t[i].mat.as_mut_slice();
        let v = v_t[i].mat.as_mut_slice();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_m_b1 * g[j];
            v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let mut update = lr * m_hat / (v_hat.sqrt() + eps);
            if decay {
                update += lr * wd * p[j];
            }
            p[j] -= update;
        }
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_n: f64,
    pub l_p: f64,
    pub total: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
}

/// Trains a variant from `theta_init` (normally a copy of the proxy). Epoch
/// shuffles and dropout draw from streams derived from `cfg.seed`, so a run
/// is a pure function of its inputs. Returns the trained parameters and one
/// log entry per optimizer step; with no samples the parameters come back
/// untouched.
pub fn train<T: Scalar>(
    theta_init: ModelParams<T>,
    theta0: &ModelParams<T>,
    samples: &[Sample],
    weights: &[TokenWeights],
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, Vec<StepLog>)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok((theta_init, Vec::new()));
    }
    if cfg.variant.uses_preference_weights() && weights.len() != samples.len() {
        return Err(Error::ShapeMismatch {
            op: "train",
            details: format!("{} weight sets for {} samples", weights.len(), samples.len()),
        });
    }
    let mut theta = theta_init;
    let mut state = AdamState::new(*theta.dims())?;
    let mut logs = Vec::new();
    let mut step = 0usize;
    let placeholder = TokenWeights::uniform(0);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            ChaCha20Rng::seed_from_u64(derive_seed("epoch-shuffle", &[cfg.seed, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        for (epoch_step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let w_batch: Vec<&TokenWeights> = if cfg.variant.uses_preference_weights() {
                chunk.iter().map(|&i| &weights[i]).collect()
            } else {
                vec![&placeholder; batch.len()]
            };
            let mut dropout_rng = ChaCha20Rng::seed_from_u64(derive_seed(
                "dropout",
                &[cfg.seed, epoch as u64, epoch_step as u64],
            ));
            let (breakdown, mut grads) =
                loss_and_grads(&theta, theta0, &batch, &w_batch, cfg, Some(&mut dropout_rng))?;
            let norm = match cfg.grad_clip {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => grad_norm(&grads),
            };
            adamw_step(&mut theta, &grads, &mut state, cfg);
            logs.push(StepLog {
                epoch,
                step,
                l_n: breakdown.l_n,
                l_p: breakdown.l_p,
                total: breakdown.total,
                grad_norm: norm,
            });
            step += 1;
        }
    }
    Ok((theta, logs))
}

/// Symmetric finite difference: (f(x+h) − f(x−h)) / 2h.
pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute guard: |a − b| / max(|a|, |b|, 1e-8).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// One checked coordinate: where it lives and how the analytic gradient
/// compared to the finite difference.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub flat_index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
}

/// Compares analytic gradients against central differences at `n_coords`
/// randomly chosen parameters (double precision, dropout forced off so the
/// objective is differentiable and deterministic). The optional environment
/// variable `CAUSALIGN_GRADCHECK_CORRUPT` perturbs the first checked
/// analytic value by 1e-3 — a self-test hook proving the harness can detect
/// a wrong gradient.
pub fn grad_check(
    theta: &ModelParams<f64>,
    theta0: &ModelParams<f64>,
    batch: &[&Sample],
    weights: &[&TokenWeights],
    cfg: &TrainConfig,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.dropout = 0.0;
    let (_, grads) = loss_and_grads(theta, theta0, batch, weights, &cfg, None)?;

    let flat_len = theta.flat_len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = Vec::with_capacity(n_coords.min(flat_len));
    while picked.len() < n_coords.min(flat_len) {
        let idx = rand::Rng::gen_range(&mut rng, 0..flat_len);
        if !picked.contains(&idx) {
            picked.push(idx);
        }
    }

    let corrupt = std::env::var("CAUSALIGN_GRADCHECK_CORRUPT").is_ok();
    let mut coords = Vec::with_capacity(picked.len());
    let mut max_rel_err = 0.0f64;
    for (ci, &idx) in picked.iter().enumerate() {
        let x0 = theta.get_flat(idx);
        let numeric = central_diff(
            |x| {
                let mut probe = theta.clone();
                probe.set_flat(idx, x);
                let (breakdown, _) = loss_and_grads(&probe, theta0, batch, weights, &cfg, None)
                    .expect("perturbed loss evaluation failed");
                breakdown.total
            },
            x0,
            h,
        );
        let mut analytic = grads.get_flat(idx);
        if corrupt && ci == 0 {
            analytic += 1e-3;
        }
        let rel_err = relative_error(analytic, numeric);
        max_rel_err = max_rel_err.max(rel_err);
        coords.push(CoordCheck {
            flat_index: idx,
            tensor: theta.flat_tensor_name(idx),
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport { coords, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn tiny_dims() -> ModelDims {
        ModelDims { vocab_size: 48, d_model: 16, n_layers: 1, n_heads: 2, max_seq: 64 }
    }

    fn sample(user: &str) -> Sample {
        Sample {
            user_id: user.into(),
            query: vec![5, 6, 7],
            history: vec![vec![8, 9, 10, 11], vec![12, 13]],
            target: vec![14, 15, 16, 17],
            pref_mask: Some(vec![true, false, true, false]),
        }
    }

    fn no_history_sample(user: &str) -> Sample {
        Sample { history: vec![], ..sample(user) }
    }

    fn cfg_for(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            alpha: if variant.uses_preference_loss() { 0.1 } else { 0.0 },
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    fn uniform_weights(samples: &[&Sample]) -> Vec<TokenWeights> {
        samples.iter().map(|s| TokenWeights::uniform(s.target.len())).collect()
    }

    fn proxy_weights(theta0: &ModelParams<f64>, samples: &[&Sample]) -> Vec<TokenWeights> {
        let owned: Vec<Sample> = samples.iter().map(|&s| s.clone()).collect();
        crate::causal::precompute_weights(theta0, &owned, 0.05, 0.9, 0.1)
            .unwrap()
            .per_sample
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.alpha = -0.1));
        assert!(bad(|c| {
            c.variant = Variant::CausalOnly;
            c.alpha = 0.0;
        }));
        assert!(bad(|c| c.delta = 1.0));
        assert!(bad(|c| c.lambda = 0.0));
        assert!(bad(|c| c.epsilon = 0.95)); // above lambda
        assert!(bad(|c| c.learning_rate = 0.0));
        assert!(bad(|c| c.dropout = 1.0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.grad_clip = Some(0.0)));
    }

    #[test]
    fn variant_strings_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn base_loss_matches_plain_cross_entropy() {
        let dims = tiny_dims();
        let theta = ModelParams::<f64>::init(dims, 1).unwrap();
        let s = sample("u0");
        let batch = [&s];
        let w = uniform_weights(&batch);
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let (breakdown, _) =
            loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg_for(Variant::Base), None)
                .unwrap();

        // Independent oracle straight from the forward probabilities.
        let probs = crate::model::target_probs(&theta, &s, true).unwrap();
        let expected: f64 = s
            .target
            .iter()
            .enumerate()
            .map(|(t, &y)| -probs.get(t, y as usize).ln())
            .sum();
        assert!((breakdown.l_n - expected).abs() < 1e-10);
        assert_eq!(breakdown.l_p, 0.0);
        assert!((breakdown.total - expected).abs() < 1e-10);
    }

    #[test]
    fn no_history_variant_ignores_the_history() {
        let dims = tiny_dims();
        let theta = ModelParams::<f64>::init(dims, 2).unwrap();
        let with = sample("u0");
        let without = no_history_sample("u0");
        let cfg = cfg_for(Variant::NoHistorySft);
        let batch_a = [&with];
        let batch_b = [&without];
        let w = uniform_weights(&batch_a);
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let (a, ga) = loss_and_grads(&theta, &theta, &batch_a, &w_refs, &cfg, None).unwrap();
        let (b, gb) = loss_and_grads(&theta, &theta, &batch_b, &w_refs, &cfg, None).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(ga.checksum(), gb.checksum());
    }

    #[test]
    fn zero_weights_zero_the_likelihood_term_and_its_gradient() {
        let dims = tiny_dims();
        let theta = ModelParams::<f64>::init(dims, 3).unwrap();
        let s = sample("u0");
        let batch = [&s];
        let zeros = TokenWeights {
            weights: vec![0.0; s.target.len()],
            lambda: 1.0,
            epsilon: 1.0,
            delta: 0.0,
            fingerprint: theta.checksum(),
        };
        let w_refs = [&zeros];
        let cfg = cfg_for(Variant::NormOnly);
        let (breakdown, grads) =
            loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg, None).unwrap();
        assert_eq!(breakdown.l_n, 0.0);
        assert_eq!(breakdown.total, 0.0);
        assert!(grads.tensors().iter().all(|t| t.mat.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn weighted_variants_reject_foreign_fingerprints() {
        let dims = tiny_dims();
        let theta = ModelParams::<f64>::init(dims, 4).unwrap();
        let other = ModelParams::<f64>::init(dims, 5).unwrap();
        let s = sample("u0");
        let batch = [&s];
        let w = proxy_weights(&other, &batch); // fingerprinted against `other`
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let err = loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg_for(Variant::Full), None);
        assert!(matches!(err, Err(Error::FingerprintMismatch { .. })));
        // The same weights are accepted when theta0 actually is `other`.
        assert!(loss_and_grads(&theta, &other, &batch, &w_refs, &cfg_for(Variant::Full), None)
            .is_ok());
    }

    #[test]
    fn contrast_term_on_empty_history_scores_ln_v() {
        let dims = tiny_dims();
        let theta = ModelParams::<f64>::init(dims, 6).unwrap();
        let s = no_history_sample("u0");
        let batch = [&s];
        let w = proxy_weights(&theta, &batch);
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let (breakdown, _) =
            loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg_for(Variant::Full), None)
                .unwrap();
        let ln_v = (dims.vocab_size as f64).ln();
        for terms in &breakdown.per_token_p {
            for (&term, &wt) in terms.iter().zip(&w[0].weights) {
                assert!((term - wt * ln_v).abs() < 1e-9, "term {term} weight {wt}");
            }
        }
    }

    #[test]
    fn gradients_are_linear_in_alpha() {
        let dims = tiny_dims();
        let theta = ModelParams::<f64>::init(dims, 7).unwrap();
        let s = sample("u0");
        let batch = [&s];
        let w = uniform_weights(&batch);
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let at = |alpha: f64| {
            let cfg = TrainConfig { alpha, ..cfg_for(Variant::CausalOnly) };
            loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg, None).unwrap()
        };
        let (b1, g1) = at(0.1);
        let (b2, g2) = at(0.2);
        // Loss: L(2α) − L(α) = α·L_p.
        assert!((b2.total - b1.total - 0.1 * b1.l_p).abs() < 1e-12);
        assert_eq!(b1.l_p, b2.l_p);
        // Gradient: g(2α) − g(α) = g(α) − g(0) elementwise.
        let cfg0 = cfg_for(Variant::Base);
        let (_, g0) = loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg0, None).unwrap();
        let (t0, t1, t2) = (g0.tensors(), g1.tensors(), g2.tensors());
        for i in 0..t0.len() {
            for ((&a, &b), &c) in
                t0[i].mat.iter().zip(t1[i].mat.iter()).zip(t2[i].mat.iter())
            {
                assert!(((c - b) - (b - a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_parameters_are_reported_not_propagated() {
        let dims = tiny_dims();
        let mut theta = ModelParams::<f64>::init(dims, 8).unwrap();
        theta.wte.set(0, 0, f64::NAN);
        let s = sample("u0");
        let batch = [&s];
        let w = uniform_weights(&batch);
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let err = loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg_for(Variant::Base), None);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let dims = ModelDims { vocab_size: 8, d_model: 4, n_layers: 1, n_heads: 1, max_seq: 8 };
        let mut theta = ModelParams::<f64>::zeros(dims).unwrap();
        theta.wte.set(0, 0, 1.0);
        let mut grads = ModelParams::<f64>::zeros(dims).unwrap();
        grads.wte.set(0, 0, 0.5);
        let mut state = AdamState::new(dims).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut theta, &grads, &mut state, &cfg);

        // Bias correction makes the first step lr·g/(|g| + eps).
        let m_hat = (0.1 * 0.5) / (1.0 - 0.9);
        let v_hat: f64 = (0.001 * 0.25) / (1.0 - 0.999);
        let expected = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((theta.wte.get(0, 0) - expected).abs() < 1e-15);
        // Everything with zero gradient and zero decay stays put.
        assert_eq!(theta.wte.get(0, 1), 0.0);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn weight_decay_skips_norm_parameters_and_biases() {
        let dims = ModelDims { vocab_size: 8, d_model: 4, n_layers: 1, n_heads: 1, max_seq: 8 };
        let mut theta = ModelParams::<f64>::init(dims, 9).unwrap();
        let before: Vec<(String, Vec<f64>)> = theta
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.mat.iter().map(|v| v.as_f64()).collect()))
            .collect();
        let grads = ModelParams::<f64>::zeros(dims).unwrap();
        let mut state = AdamState::new(dims).unwrap();
        let cfg = TrainConfig { weight_decay: 0.1, learning_rate: 0.1, ..TrainConfig::default() };
        adamw_step(&mut theta, &grads, &mut state, &cfg);

        for (view, (name, old)) in theta.tensors().iter().zip(&before) {
            assert_eq!(&view.name, name);
            for (new, &old) in view.mat.iter().zip(old) {
                if view.decay {
                    // Pure decoupled decay: θ ← θ(1 − lr·wd).
                    assert!((new.as_f64() - old * (1.0 - 0.01)).abs() < 1e-15);
                } else {
                    assert_eq!(new.as_f64(), old);
                }
            }
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let dims = ModelDims { vocab_size: 8, d_model: 4, n_layers: 1, n_heads: 1, max_seq: 8 };
        let mut theta = ModelParams::<f64>::init(dims, 10).unwrap();
        let checksum = theta.checksum();
        let grads = ModelParams::<f64>::zeros(dims).unwrap();
        let mut state = AdamState::new(dims).unwrap();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adamw_step(&mut theta, &grads, &mut state, &cfg);
        assert_eq!(theta.checksum(), checksum);
    }

    #[test]
    fn clipping_rescales_to_the_requested_norm() {
        let dims = ModelDims { vocab_size: 8, d_model: 4, n_layers: 1, n_heads: 1, max_seq: 8 };
        let mut grads = ModelParams::<f64>::zeros(dims).unwrap();
        grads.wte.set(0, 0, 3.0);
        grads.wte.set(0, 1, 4.0);
        let before = clip_grad_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grad_norm(&grads) - 1.0).abs() < 1e-12);
        // Already within bounds: untouched.
        let after = clip_grad_norm(&mut grads, 10.0);
        assert!((after - 1.0).abs() < 1e-12);
        assert!((grad_norm(&grads) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_empty_corpus_is_identity() {
        let dims = tiny_dims();
        let theta0 = ModelParams::<f64>::init(dims, 11).unwrap();
        let samples = vec![sample("u0"), sample("u1"), no_history_sample("u2")];
        let weights: Vec<TokenWeights> =
            samples.iter().map(|s| TokenWeights::uniform(s.target.len())).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            dropout: 0.1,
            ..cfg_for(Variant::Base)
        };
        let run = || {
            train(theta0.clone(), &theta0, &samples, &weights, &cfg).map(|(p, logs)| {
                (p.checksum(), logs)
            })
        };
        let (c1, logs1) = run().unwrap();
        let (c2, logs2) = run().unwrap();
        assert_eq!(c1, c2);
        assert_eq!(logs1, logs2);
        assert_eq!(logs1.len(), 2 * 2); // ceil(3/2) batches × 2 epochs
        assert_ne!(c1, theta0.checksum(), "training should move the parameters");

        let (untouched, logs) = train(theta0.clone(), &theta0, &[], &[], &cfg).unwrap();
        assert_eq!(untouched.checksum(), theta0.checksum());
        assert!(logs.is_empty());
    }

    #[test]
    fn central_diff_and_relative_error_behave() {
        let d = central_diff(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-9);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        // The guard keeps tiny absolute noise from exploding.
        assert!(relative_error(1e-12, 0.0) < 1e-3);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_for_every_variant() {
        let dims = ModelDims { vocab_size: 32, d_model: 12, n_layers: 1, n_heads: 2, max_seq: 48 };
        let theta = ModelParams::<f64>::init(dims, 12).unwrap();
        let theta0 = ModelParams::<f64>::init(dims, 13).unwrap();
        let s0 = sample("u0");
        let s1 = no_history_sample("u1");
        let batch = [&s0, &s1];
        let weights = proxy_weights(&theta0, &batch);
        let w_refs: Vec<&TokenWeights> = weights.iter().collect();
        for variant in Variant::ALL {
            let cfg = cfg_for(variant);
            let report =
                grad_check(&theta, &theta0, &batch, &w_refs, &cfg, 24, 1e-5, 99).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "variant {variant}: max rel err {} at {:?}",
                report.max_rel_err,
                report.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            );
        }
    }

    #[test]
    fn corruption_hook_makes_the_check_fail() {
        let dims = ModelDims { vocab_size: 24, d_model: 8, n_layers: 1, n_heads: 1, max_seq: 32 };
        let theta = ModelParams::<f64>::init(dims, 14).unwrap();
        let s = no_history_sample("u0");
        let batch = [&s];
        let w = uniform_weights(&batch);
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let cfg = cfg_for(Variant::Base);
        std::env::set_var("CAUSALIGN_GRADCHECK_CORRUPT", "1");
        let report = grad_check(&theta, &theta, &batch, &w_refs, &cfg, 8, 1e-5, 7).unwrap();
        std::env::remove_var("CAUSALIGN_GRADCHECK_CORRUPT");
        assert!(report.max_rel_err > 1e-4, "corruption went undetected");
        let clean = grad_check(&theta, &theta, &batch, &w_refs, &cfg, 8, 1e-5, 7).unwrap();
        assert!(clean.max_rel_err < 1e-4);
    }

    #[test]
    fn dropout_in_training_masks_are_reproducible_but_nontrivial() {
        let dims = tiny_dims();
        let theta = ModelParams::<f64>::init(dims, 15).unwrap();
        let s = sample("u0");
        let batch = [&s];
        let w = uniform_weights(&batch);
        let w_refs: Vec<&TokenWeights> = w.iter().collect();
        let cfg = TrainConfig { dropout: 0.3, ..cfg_for(Variant::Base) };
        let with_seed = |seed: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            loss_and_grads(&theta, &theta, &batch, &w_refs, &cfg, Some(&mut rng))
                .unwrap()
                .0
                .total
        };
        assert_eq!(with_seed(1), with_seed(1));
        assert_ne!(with_seed(1), with_seed(2));
        // The contrast variants ignore dropout entirely.
        let cfg_lp = TrainConfig { dropout: 0.3, ..cfg_for(Variant::Full) };
        let w2 = proxy_weights(&theta, &batch);
        let w2_refs: Vec<&TokenWeights> = w2.iter().collect();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = loss_and_grads(&theta, &theta, &batch, &w2_refs, &cfg_lp, Some(&mut rng))
            .unwrap()
            .0;
        let b = loss_and_grads(&theta, &theta, &batch, &w2_refs, &cfg_lp, None).unwrap().0;
        assert_eq!(a.total, b.total);
    }
}
