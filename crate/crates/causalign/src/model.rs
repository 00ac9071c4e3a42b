//! A small decoder-only transformer with tied input/output embeddings.
//!
//! Pre-norm residual blocks: x += attn(ln1(x)); x += mlp(ln2(x)); a final
//! layer norm; logits = x · wteᵀ. Learned positional embeddings, no biases
//! on the attention projections, biases on the two MLP matrices, GELU (tanh
//! form) activation. The forward pass records every intermediate needed by
//! the trainer's hand-written backward pass in a [`ForwardTrace`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{pack_context, Sample, EOS};
use crate::error::{Error, Result};
use crate::mat::{softmax_in_place, Mat};
use crate::scalar::{Precision, Scalar};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters; fixed for the life of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Mat<T>,
    pub ln1_bias: Mat<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ln2_gain: Mat<T>,
    pub ln2_bias: Mat<T>,
    pub w1: Mat<T>,
    pub b1: Mat<T>,
    pub w2: Mat<T>,
    pub b2: Mat<T>,
}

/// All trainable tensors. Also serves as the gradient and optimizer-moment
/// container, which are parameter-shaped by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    dims: ModelDims,
    pub wte: Mat<T>,
    pub wpe: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Mat<T>,
    pub lnf_bias: Mat<T>,
}

/// Gradients share the exact shape of the parameters they correspond to.
pub type Gradients<T> = ModelParams<T>;

pub struct TensorView<'a, T> {
    pub name: String,
    pub mat: &'a Mat<T>,
    /// Whether decoupled weight decay applies (matrices yes; layer-norm
    /// parameters and biases no).
    pub decay: bool,
}

pub struct TensorViewMut<'a, T> {
    pub name: String,
    pub mat: &'a mut Mat<T>,
    pub decay: bool,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters; the shape for gradients and optimizer moments.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let layers = (0..dims.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Mat::zeros(1, d),
                ln1_bias: Mat::zeros(1, d),
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                ln2_gain: Mat::zeros(1, d),
                ln2_bias: Mat::zeros(1, d),
                w1: Mat::zeros(d, 4 * d),
                b1: Mat::zeros(1, 4 * d),
                w2: Mat::zeros(4 * d, d),
                b2: Mat::zeros(1, d),
            })
            .collect();
        Ok(ModelParams {
            dims,
            wte: Mat::zeros(dims.vocab_size, d),
            wpe: Mat::zeros(dims.max_seq, d),
            layers,
            lnf_gain: Mat::zeros(1, d),
            lnf_bias: Mat::zeros(1, d),
        })
    }

    /// Fresh parameters: weight matrices ~ N(0, 0.02), layer-norm gains 1,
    /// all biases 0. Tensors are drawn in canonical order so a seed pins the
    /// full parameter vector.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        for t in params.tensors_mut() {
            let is_gain = t.name.ends_with("gain");
            let is_bias = t.name.ends_with("bias") || t.name.ends_with(".b1") || t.name.ends_with(".b2");
            if is_gain {
                t.mat.fill(T::one());
            } else if is_bias {
                t.mat.fill(T::zero());
            } else {
                for v in t.mat.iter_mut() {
                    *v = T::from_f64(normal.sample(&mut rng));
                }
            }
        }
        Ok(params)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    /// Canonical tensor order: wte, wpe, per-layer (ln1, attention, ln2,
    /// mlp), final layer norm. Checkpoints, checksums, optimizer state, and
    /// flat indexing all follow this order.
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let mut out = Vec::with_capacity(2 + 12 * self.layers.len() + 2);
        out.push(TensorView { name: "wte".into(), mat: &self.wte, decay: true });
        out.push(TensorView { name: "wpe".into(), mat: &self.wpe, decay: true });
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.push(TensorView { name: n("ln1.gain"), mat: &l.ln1_gain, decay: false });
            out.push(TensorView { name: n("ln1.bias"), mat: &l.ln1_bias, decay: false });
            out.push(TensorView { name: n("wq"), mat: &l.wq, decay: true });
            out.push(TensorView { name: n("wk"), mat: &l.wk, decay: true });
            out.push(TensorView { name: n("wv"), mat: &l.wv, decay: true });
            out.push(TensorView { name: n("wo"), mat: &l.wo, decay: true });
            out.push(TensorView { name: n("ln2.gain"), mat: &l.ln2_gain, decay: false });
            out.push(TensorView { name: n("ln2.bias"), mat: &l.ln2_bias, decay: false });
            out.push(TensorView { name: n("w1"), mat: &l.w1, decay: true });
            out.push(TensorView { name: n("b1"), mat: &l.b1, decay: false });
            out.push(TensorView { name: n("w2"), mat: &l.w2, decay: true });
            out.push(TensorView { name: n("b2"), mat: &l.b2, decay: false });
        }
        out.push(TensorView { name: "ln_f.gain".into(), mat: &self.lnf_gain, decay: false });
        out.push(TensorView { name: "ln_f.bias".into(), mat: &self.lnf_bias, decay: false });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        let mut out = Vec::with_capacity(2 + 12 * self.layers.len() + 2);
        out.push(TensorViewMut { name: "wte".into(), mat: &mut self.wte, decay: true });
        out.push(TensorViewMut { name: "wpe".into(), mat: &mut self.wpe, decay: true });
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.push(TensorViewMut { name: n("ln1.gain"), mat: &mut l.ln1_gain, decay: false });
            out.push(TensorViewMut { name: n("ln1.bias"), mat: &mut l.ln1_bias, decay: false });
            out.push(TensorViewMut { name: n("wq"), mat: &mut l.wq, decay: true });
            out.push(TensorViewMut { name: n("wk"), mat: &mut l.wk, decay: true });
            out.push(TensorViewMut { name: n("wv"), mat: &mut l.wv, decay: true });
            out.push(TensorViewMut { name: n("wo"), mat: &mut l.wo, decay: true });
            out.push(TensorViewMut { name: n("ln2.gain"), mat: &mut l.ln2_gain, decay: false });
            out.push(TensorViewMut { name: n("ln2.bias"), mat: &mut l.ln2_bias, decay: false });
            out.push(TensorViewMut { name: n("w1"), mat: &mut l.w1, decay: true });
            out.push(TensorViewMut { name: n("b1"), mat: &mut l.b1, decay: false });
            out.push(TensorViewMut { name: n("w2"), mat: &mut l.w2, decay: true });
            out.push(TensorViewMut { name: n("b2"), mat: &mut l.b2, decay: false });
        }
        out.push(TensorViewMut { name: "ln_f.gain".into(), mat: &mut self.lnf_gain, decay: false });
        out.push(TensorViewMut { name: "ln_f.bias".into(), mat: &mut self.lnf_bias, decay: false });
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.mat.len()).sum()
    }

    /// Hex sha256 over tensor names and f64-widened little-endian values in
    /// canonical order. Identifies a parameter state exactly.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.tensors() {
            h.update(t.name.as_bytes());
            for v in t.mat.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn flat_len(&self) -> usize {
        self.param_count()
    }

    /// Reads the parameter at a global flat index (canonical tensor order,
    /// row-major within a tensor).
    pub fn get_flat(&self, idx: usize) -> T {
        let mut rest = idx;
        for t in self.tensors() {
            if rest < t.mat.len() {
                return t.mat.as_slice()[rest];
            }
            rest -= t.mat.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn set_flat(&mut self, idx: usize, v: T) {
        let mut rest = idx;
        for t in self.tensors_mut() {
            if rest < t.mat.len() {
                t.mat.as_mut_slice()[rest] = v;
                return;
            }
            rest -= t.mat.len();
        }
        panic!("flat index {idx} out of range");
    }

    /// Name of the tensor a flat index falls in; for diagnostics.
    pub fn flat_tensor_name(&self, idx: usize) -> String {
        let mut rest = idx;
        for t in self.tensors() {
            if rest < t.mat.len() {
                return t.name;
            }
            rest -= t.mat.len();
        }
        panic!("flat index {idx} out of range");
    }
}

/// Parameter count as a closed function of the dimensions.
pub fn param_count_for(dims: &ModelDims) -> usize {
    let d = dims.d_model;
    let per_layer = 2 * d        // ln1
        + 4 * d * d              // wq wk wv wo
        + 2 * d                  // ln2
        + d * 4 * d + 4 * d      // w1, b1
        + 4 * d * d + d;         // w2, b2
    dims.vocab_size * d + dims.max_seq * d + dims.n_layers * per_layer + 2 * d
}

pub(crate) struct LnTrace<T> {
    pub xhat: Mat<T>,
    pub rstd: Vec<T>,
}

pub(crate) struct LayerTrace<T> {
    pub ln1: LnTrace<T>,
    pub ln1_out: Mat<T>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    pub attn_probs: Vec<Mat<T>>,
    pub ho: Mat<T>,
    pub attn_mask: Option<Vec<T>>,
    pub ln2: LnTrace<T>,
    pub ln2_out: Mat<T>,
    pub h_pre: Mat<T>,
    pub h_act: Mat<T>,
    pub mlp_mask: Option<Vec<T>>,
}

/// Every intermediate of one forward pass, retained for the backward pass.
pub struct ForwardTrace<T> {
    pub ids: Vec<u32>,
    pub(crate) embed_mask: Option<Vec<T>>,
    pub(crate) layers: Vec<LayerTrace<T>>,
    pub(crate) final_in: Mat<T>,
    pub(crate) lnf: LnTrace<T>,
    pub(crate) final_normed: Mat<T>,
    pub logits: Mat<T>,
}

fn layer_norm<T: Scalar>(x: &Mat<T>, gain: &Mat<T>, bias: &Mat<T>) -> (LnTrace<T>, Mat<T>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut xhat = Mat::zeros(rows, cols);
    let mut out = Mat::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::from_f64(1.0 / cols as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        let o = out.row_mut(r);
        for c in 0..cols {
            xh[c] = (row[c] - mean) * rs;
            o[c] = gain.row(0)[c] * xh[c] + bias.row(0)[c];
        }
    }
    (LnTrace { xhat, rstd }, out)
}

fn add_bias_rows<T: Scalar>(m: &mut Mat<T>, bias: &Mat<T>) {
    debug_assert_eq!(bias.cols(), m.cols());
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        for (v, &b) in row.iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c1 = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c2 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c1 * (x + c2 * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_prime<T: Scalar>(x: T) -> T {
    let c1 = T::from_f64(0.797_884_560_802_865_4);
    let c2 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c1 * (x + c2 * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c1 * (T::one() + three * c2 * x * x)
}

fn dropout_mask<T: Scalar, R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep_scale })
        .collect()
}

fn apply_mask<T: Scalar>(m: &mut Mat<T>, mask: &[T]) {
    for (v, &s) in m.iter_mut().zip(mask) {
        *v *= s;
    }
}

/// Full forward pass, recording intermediates. `dropout` is `(p, rng)`;
/// pass `None` for deterministic inference and for any loss that compares
/// two passes.
pub fn forward_trace<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[u32],
    mut dropout: Option<(f64, &mut ChaCha20Rng)>,
) -> Result<ForwardTrace<T>> {
    let dims = params.dims();
    let t_len = ids.len();
    if t_len == 0 {
        return Err(Error::InvalidConfig("cannot run the model on zero tokens".into()));
    }
    if t_len > dims.max_seq {
        return Err(Error::ContextOverflow {
            user_id: String::new(),
            got: t_len,
            max: dims.max_seq,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= dims.vocab_size) {
        return Err(Error::TokenOutOfRange { id: bad, vocab_size: dims.vocab_size });
    }
    dropout = match dropout {
        Some((p, _)) if !(0.0..1.0).contains(&p) => {
            return Err(Error::InvalidConfig(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        Some((p, _)) if p == 0.0 => None,
        other => other,
    };
    let d = dims.d_model;
    let n_heads = dims.n_heads;
    let hd = dims.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = Mat::zeros(t_len, d);
    for (i, &id) in ids.iter().enumerate() {
        let row = x.row_mut(i);
        let te = params.wte.row(id as usize);
        let pe = params.wpe.row(i);
        for c in 0..d {
            row[c] = te[c] + pe[c];
        }
    }
    let embed_mask = dropout.as_mut().map(|(p, rng)| dropout_mask::<T, _>(t_len * d, *p, rng));
    if let Some(mask) = &embed_mask {
        apply_mask(&mut x, mask);
    }

    let mut layers = Vec::with_capacity(dims.n_layers);
    for lp in &params.layers {
        let (ln1, ln1_out) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let q = ln1_out.matmul(&lp.wq);
        let k = ln1_out.matmul(&lp.wk);
        let v = ln1_out.matmul(&lp.wv);

        let mut attn_probs = Vec::with_capacity(n_heads);
        let mut ho = Mat::zeros(t_len, d);
        for h in 0..n_heads {
            let off = h * hd;
            let mut scores = Mat::zeros(t_len, t_len);
            T::gemm(
                t_len, hd, t_len,
                scale,
                &q.as_slice()[off..], d as isize, 1,
                &k.as_slice()[off..], 1, d as isize,
                T::zero(),
                scores.as_mut_slice(), t_len as isize, 1,
            );
            for i in 0..t_len {
                let row = scores.row_mut(i);
                softmax_in_place(&mut row[..=i]);
                for c in row[i + 1..].iter_mut() {
                    *c = T::zero();
                }
            }
            T::gemm(
                t_len, t_len, hd,
                T::one(),
                scores.as_slice(), t_len as isize, 1,
                &v.as_slice()[off..], d as isize, 1,
                T::zero(),
                &mut ho.as_mut_slice()[off..], d as isize, 1,
            );
            attn_probs.push(scores);
        }
        let mut attn_out = ho.matmul(&lp.wo);
        let attn_mask = dropout.as_mut().map(|(p, rng)| dropout_mask::<T, _>(t_len * d, *p, rng));
        if let Some(mask) = &attn_mask {
            apply_mask(&mut attn_out, mask);
        }
        x.add_assign(&attn_out);

        let (ln2, ln2_out) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
        let mut h_pre = ln2_out.matmul(&lp.w1);
        add_bias_rows(&mut h_pre, &lp.b1);
        let mut h_act = Mat::zeros(t_len, 4 * d);
        for (o, &i) in h_act.iter_mut().zip(h_pre.iter()) {
            *o = gelu(i);
        }
        let mut mlp_out = h_act.matmul(&lp.w2);
        add_bias_rows(&mut mlp_out, &lp.b2);
        let mlp_mask = dropout.as_mut().map(|(p, rng)| dropout_mask::<T, _>(t_len * d, *p, rng));
        if let Some(mask) = &mlp_mask {
            apply_mask(&mut mlp_out, mask);
        }
        x.add_assign(&mlp_out);

        layers.push(LayerTrace {
            ln1, ln1_out, q, k, v, attn_probs, ho, attn_mask,
            ln2, ln2_out, h_pre, h_act, mlp_mask,
        });
    }

    let final_in = x;
    let (lnf, final_normed) = layer_norm(&final_in, &params.lnf_gain, &params.lnf_bias);
    let logits = final_normed.matmul_nt(&params.wte);

    Ok(ForwardTrace {
        ids: ids.to_vec(),
        embed_mask,
        layers,
        final_in,
        lnf,
        final_normed,
        logits,
    })
}

/// Logits only, deterministic (no dropout).
pub fn forward<T: Scalar>(params: &ModelParams<T>, ids: &[u32]) -> Result<Mat<T>> {
    Ok(forward_trace(params, ids, None)?.logits)
}

/// Per-target-position probability rows for a sample under one packing.
/// Row t is the model's distribution for target token t, i.e. the softmaxed
/// logits at the packed position immediately before it.
pub fn target_probs<T: Scalar>(
    params: &ModelParams<T>,
    sample: &Sample,
    with_history: bool,
) -> Result<Mat<T>> {
    let dims = params.dims();
    let packed = pack_context(sample, with_history, dims.vocab_size, dims.max_seq)?;
    let logits = forward(params, &packed.ids)?;
    let span = packed.target_span;
    let mut probs = Mat::zeros(span.len, dims.vocab_size);
    for t in 0..span.len {
        let row_idx = span.start + t - 1;
        probs.row_mut(t).copy_from_slice(logits.row(row_idx));
        softmax_in_place(probs.row_mut(t));
    }
    Ok(probs)
}

/// Greedy decoding from a prompt: repeatedly appends the argmax token (ties
/// resolved to the smallest id), stopping after `max_new` tokens, on an
/// emitted `<eos>` (not included in the output), or when the context is
/// full.
pub fn greedy_decode<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("cannot decode from an empty prompt".into()));
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && ids.len() < params.dims().max_seq {
        let logits = forward(params, &ids)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best as u32 == EOS {
            break;
        }
        ids.push(best as u32);
        out.push(best as u32);
    }
    Ok(out)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    format_version: u32,
    dims: ModelDims,
    precision: Precision,
    vocab_sha256: String,
    config_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// Metadata read back alongside the parameters.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub precision: Precision,
    pub vocab_sha256: String,
    pub config_sha256: String,
}

/// Writes the parameters with dims, precision, and the fingerprints of the
/// vocabulary and run configuration they were trained against. Values are
/// stored widened to f64 so a double-precision checkpoint round-trips
/// exactly.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    path: &Path,
    vocab_sha256: &str,
    config_sha256: &str,
) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        dims: *params.dims(),
        precision: T::PRECISION,
        vocab_sha256: vocab_sha256.to_string(),
        config_sha256: config_sha256.to_string(),
        tensors: params
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                rows: t.mat.rows(),
                cols: t.mat.cols(),
                data: t.mat.iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&file).expect("checkpoint serialization cannot fail");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, enforcing format version, tensor order and shapes,
/// the runtime precision, and (when given) the expected vocabulary
/// fingerprint.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected_vocab_sha256: Option<&str>,
) -> Result<(ModelParams<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingArtifact {
        what: "checkpoint",
        path: path.to_path_buf(),
        hint: format!("train or pretrain first ({e})"),
    })?;
    let file: CheckpointFile = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        what: "checkpoint",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {} (this build reads {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    if file.precision != T::PRECISION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint precision is {}, run precision is {}",
            file.precision,
            T::PRECISION
        )));
    }
    if let Some(expected) = expected_vocab_sha256 {
        if expected != file.vocab_sha256 {
            return Err(Error::FingerprintMismatch {
                what: "vocabulary",
                expected: expected.to_string(),
                found: file.vocab_sha256,
            });
        }
    }
    let mut params = ModelParams::<T>::zeros(file.dims)?;
    {
        let mut views = params.tensors_mut();
        if views.len() != file.tensors.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                views.len(),
                file.tensors.len()
            )));
        }
        for (view, entry) in views.iter_mut().zip(&file.tensors) {
            if view.name != entry.name
                || view.mat.rows() != entry.rows
                || view.mat.cols() != entry.cols
                || entry.data.len() != entry.rows * entry.cols
            {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {} ({}x{}) does not match expected {} ({}x{})",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    view.name,
                    view.mat.rows(),
                    view.mat.cols()
                )));
            }
            for (slot, &v) in view.mat.as_mut_slice().iter_mut().zip(&entry.data) {
                *slot = T::from_f64(v);
            }
        }
    }
    let meta = CheckpointMeta {
        dims: file.dims,
        precision: file.precision,
        vocab_sha256: file.vocab_sha256,
        config_sha256: file.config_sha256,
    };
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, SEP};

    fn tiny_dims() -> ModelDims {
        ModelDims { vocab_size: 64, d_model: 16, n_layers: 1, n_heads: 2, max_seq: 32 }
    }

    fn sample_ids() -> Vec<u32> {
        vec![BOS, 7, 9, 11, SEP, 5, 6, SEP, 20, 21, 22]
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        // V=64, d=16, 1 layer, max_seq=32:
        // wte 1024 + wpe 512 + layer (32+1024+32+1088+1040) + ln_f 32 = 4784.
        let dims = tiny_dims();
        let params = ModelParams::<f64>::init(dims, 1).unwrap();
        assert_eq!(param_count_for(&dims), 4784);
        assert_eq!(params.param_count(), 4784);
        assert_eq!(params.flat_len(), 4784);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let dims = tiny_dims();
        let a = ModelParams::<f64>::init(dims, 7).unwrap();
        let b = ModelParams::<f64>::init(dims, 7).unwrap();
        let c = ModelParams::<f64>::init(dims, 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_sets_gains_to_one_and_biases_to_zero() {
        let params = ModelParams::<f64>::init(tiny_dims(), 3).unwrap();
        assert!(params.lnf_gain.iter().all(|&v| v == 1.0));
        assert!(params.lnf_bias.iter().all(|&v| v == 0.0));
        let l = &params.layers[0];
        assert!(l.ln1_gain.iter().all(|&v| v == 1.0));
        assert!(l.b1.iter().all(|&v| v == 0.0));
        assert!(l.b2.iter().all(|&v| v == 0.0));
        // Weight matrices are actually perturbed.
        assert!(l.wq.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dims_validation_rejects_bad_head_split() {
        let dims = ModelDims { vocab_size: 8, d_model: 10, n_layers: 1, n_heads: 4, max_seq: 8 };
        assert!(dims.validate().is_err());
    }

    #[test]
    fn forward_is_pure() {
        let params = ModelParams::<f64>::init(tiny_dims(), 5).unwrap();
        let a = forward(&params, &sample_ids()).unwrap();
        let b = forward(&params, &sample_ids()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = ModelParams::<f64>::init(tiny_dims(), 5).unwrap();
        assert!(forward(&params, &[]).is_err());
        assert!(forward(&params, &vec![1; 33]).is_err());
        assert!(matches!(
            forward(&params, &[1, 64]),
            Err(Error::TokenOutOfRange { id: 64, .. })
        ));
    }

    #[test]
    fn attention_is_causal() {
        let params = ModelParams::<f64>::init(tiny_dims(), 9).unwrap();
        let ids = sample_ids();
        let full = forward(&params, &ids).unwrap();
        let prefix = forward(&params, &ids[..6]).unwrap();
        for r in 0..6 {
            for c in 0..full.cols() {
                let diff = (full.get(r, c) - prefix.get(r, c)).abs();
                assert!(diff < 1e-12, "row {r} col {c} differs by {diff}");
            }
        }
    }

    #[test]
    fn zeroed_embeddings_give_uniform_distributions() {
        let mut params = ModelParams::<f64>::init(tiny_dims(), 5).unwrap();
        params.wte.fill(0.0);
        let logits = forward(&params, &[0, 1, 2]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_probs_rows_are_distributions() {
        let params = ModelParams::<f64>::init(tiny_dims(), 11).unwrap();
        let sample = Sample {
            user_id: "u".into(),
            query: vec![5, 6],
            history: vec![vec![7, 8, 9]],
            target: vec![10, 11, 12],
            pref_mask: None,
        };
        for with_history in [true, false] {
            let probs = target_probs(&params, &sample, with_history).unwrap();
            assert_eq!(probs.rows(), 3);
            assert_eq!(probs.cols(), 64);
            for t in 0..probs.rows() {
                let sum: f64 = probs.row(t).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_masks_scale_or_zero_and_p_zero_is_identity() {
        let params = ModelParams::<f64>::init(tiny_dims(), 5).unwrap();
        let ids = sample_ids();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let traced = forward_trace(&params, &ids, Some((0.5, &mut rng))).unwrap();
        let mask = traced.embed_mask.as_ref().unwrap();
        assert!(mask.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        assert!(mask.iter().any(|&v| v == 0.0));

        let mut rng2 = ChaCha20Rng::seed_from_u64(1);
        let p0 = forward_trace(&params, &ids, Some((0.0, &mut rng2))).unwrap();
        let plain = forward(&params, &ids).unwrap();
        assert_eq!(p0.logits, plain);
        assert!(p0.embed_mask.is_none());
    }

    #[test]
    fn greedy_decode_zero_budget_and_determinism() {
        let params = ModelParams::<f64>::init(tiny_dims(), 13).unwrap();
        let prompt = [BOS, SEP, 5, 6, SEP];
        assert!(greedy_decode(&params, &prompt, 0).unwrap().is_empty());
        let a = greedy_decode(&params, &prompt, 8).unwrap();
        let b = greedy_decode(&params, &prompt, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 8);
    }

    #[test]
    fn greedy_decode_stops_on_eos_without_emitting_it() {
        // Force the network to always point at <eos>: zero the final norm
        // gain so the normed output is exactly the ln_f bias, then align
        // the <eos> embedding with that bias and all other embeddings
        // against it.
        let mut params = ModelParams::<f64>::init(tiny_dims(), 13).unwrap();
        params.lnf_gain.fill(0.0);
        params.lnf_bias.fill(0.0);
        params.lnf_bias.set(0, 0, 1.0);
        for r in 0..params.wte.rows() {
            let row = params.wte.row_mut(r);
            row.fill(0.0);
            row[0] = if r as u32 == EOS { 1.0 } else { -1.0 };
        }
        let out = greedy_decode(&params, &[BOS, SEP, 5, SEP], 8).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_decode_respects_context_limit() {
        let dims = ModelDims { vocab_size: 8, d_model: 8, n_layers: 1, n_heads: 1, max_seq: 6 };
        let params = ModelParams::<f64>::init(dims, 1).unwrap();
        let out = greedy_decode(&params, &[0, 1, 2, 3], 100).unwrap();
        assert!(out.len() <= 2, "context cap must bound generation");
    }

    #[test]
    fn greedy_ties_break_to_smallest_id() {
        // Zeroed embedding table → all logits equal → argmax must be id 0.
        let mut params = ModelParams::<f64>::init(tiny_dims(), 5).unwrap();
        params.wte.fill(0.0);
        let out = greedy_decode(&params, &[1, 2], 1).unwrap();
        assert_eq!(out, vec![0]);
    }

    #[test]
    fn flat_indexing_round_trips() {
        let mut params = ModelParams::<f64>::init(tiny_dims(), 17).unwrap();
        let n = params.flat_len();
        for idx in [0usize, 1, 1023, 1024, 1536, n - 1] {
            let v = params.get_flat(idx);
            params.set_flat(idx, v + 1.0);
            assert_eq!(params.get_flat(idx), v + 1.0);
            params.set_flat(idx, v);
        }
        assert_eq!(params.flat_tensor_name(0), "wte");
        assert_eq!(params.flat_tensor_name(1024), "wpe");
        assert_eq!(params.flat_tensor_name(n - 1), "ln_f.bias");
    }

    #[test]
    fn checkpoint_round_trips_exactly_in_double() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let params = ModelParams::<f64>::init(tiny_dims(), 23).unwrap();
        save_checkpoint(&params, &path, "vhash", "chash").unwrap();
        let (loaded, meta) = load_checkpoint::<f64>(&path, Some("vhash")).unwrap();
        assert_eq!(params.checksum(), loaded.checksum());
        assert_eq!(meta.vocab_sha256, "vhash");
        assert_eq!(meta.config_sha256, "chash");
        assert_eq!(meta.precision, Precision::Double);
        assert_eq!(meta.dims, tiny_dims());
    }

    #[test]
    fn checkpoint_rejects_precision_and_fingerprint_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let params = ModelParams::<f32>::init(tiny_dims(), 23).unwrap();
        save_checkpoint(&params, &path, "vhash", "chash").unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path, None),
            Err(Error::IncompatibleCheckpoint(_))
        ));
        assert!(matches!(
            load_checkpoint::<f32>(&path, Some("other")),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(load_checkpoint::<f32>(&path, Some("vhash")).is_ok());
    }

    #[test]
    fn checkpoint_rejects_tampered_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let params = ModelParams::<f64>::init(tiny_dims(), 29).unwrap();
        save_checkpoint(&params, &path, "v", "c").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"wpe\"", "\"wxx\"")).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path, None),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn single_precision_forward_tracks_double() {
        let dims = tiny_dims();
        let p64 = ModelParams::<f64>::init(dims, 31).unwrap();
        let p32 = ModelParams::<f32>::init(dims, 31).unwrap();
        let ids = sample_ids();
        let l64 = forward(&p64, &ids).unwrap();
        let l32 = forward(&p32, &ids).unwrap();
        // Same seed draws the same normal variates; f32 rounding keeps the
        // two runs close but not identical.
        for r in 0..l64.rows() {
            for c in 0..l64.cols() {
                let diff = (l64.get(r, c) - l32.get(r, c) as f64).abs();
                assert!(diff < 1e-3, "row {r} col {c}: {diff}");
            }
        }
    }
}
