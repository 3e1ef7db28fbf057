//! The asymmetric autoencoder.
//!
//! ```text
//! x ─∘W─▶ tokenizer ─▶ [summary | tok_1 … tok_M] ─▶ n_layers × pre-norm block ─▶ LN ─▶ proj ─▶ z
//! z ─▶ sigmoid(A z + a)           reconstruction (one layer)
//! z ─▶ GELU MLP ─▶ logits          shared classification head
//! z ─▶ linear ─▶ logits            fine-tune head
//! ```
//!
//! All parameters live in one flat `Vec<f64>`; [`ParamLayout`] names the
//! tensors inside it. Gradients use the same layout, which keeps the
//! optimizer and checkpointing oblivious to the architecture.
//!
//! Only the summary token's final state is read out, so the last block
//! computes attention queries and the feed-forward branch for that single
//! row. Keys and values still come from every token.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{add_row_bias, col_sum_acc, dot, matmul, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    /// `layer` 0 is the tokenizer, `1..=n_layers` the transformer blocks and
    /// `n_layers + 1` the output projection.
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, actual: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_features: usize,
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub z_dim: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
}

/// Architecture knobs that do not depend on the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width; `None` means `4 · token_dim`.
    pub ff_dim: Option<usize>,
    /// Bottleneck width; `None` means `max(1, floor(M / 2))`.
    pub z_dim: Option<usize>,
    /// Classifier hidden width; `None` means `z_dim`.
    pub mlp_hidden: Option<usize>,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self { token_dim: 16, n_layers: 3, n_heads: 2, ff_dim: None, z_dim: None, mlp_hidden: None }
    }
}

impl ModelHyper {
    pub fn resolve(&self, n_features: usize, n_classes: usize) -> ModelConfig {
        let z_dim = self.z_dim.unwrap_or_else(|| default_z_dim(n_features));
        ModelConfig {
            n_features,
            token_dim: self.token_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim.unwrap_or(4 * self.token_dim),
            z_dim,
            mlp_hidden: self.mlp_hidden.unwrap_or(z_dim),
            n_classes,
        }
    }
}

pub fn default_z_dim(n_features: usize) -> usize {
    (n_features / 2).max(1)
}

impl ModelConfig {
    /// Defaults: 16-wide tokens, three blocks with two heads, bottleneck of half the input width.
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        ModelHyper::default().resolve(n_features, n_classes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.n_features == 0 {
            return bad("n_features must be positive");
        }
        if self.token_dim == 0 || self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return bad("token_dim must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("at least one transformer block is required");
        }
        if self.ff_dim == 0 || self.z_dim == 0 || self.mlp_hidden == 0 {
            return bad("ff_dim, z_dim and mlp_hidden must be positive");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_features + 1
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    #[inline]
    pub fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.start..self.start + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.start..self.start + self.len]
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, Default)]
struct BlockSpans {
    ln1_g: Span,
    ln1_b: Span,
    wq: Span,
    bq: Span,
    wk: Span,
    bk: Span,
    wv: Span,
    bv: Span,
    wo: Span,
    bo: Span,
    ln2_g: Span,
    ln2_b: Span,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

#[derive(Debug, Clone, Default)]
struct Spans {
    input_weights: Span,
    tok_scale: Span,
    tok_bias: Span,
    col_emb: Span,
    summary: Span,
    blocks: Vec<BlockSpans>,
    lnf_g: Span,
    lnf_b: Span,
    proj_w: Span,
    proj_b: Span,
    dec_w: Span,
    dec_b: Span,
    cls_w1: Span,
    cls_b1: Span,
    cls_w2: Span,
    cls_b2: Span,
    ft_w: Span,
    ft_b: Span,
}

/// Named tensors inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    spans: Spans,
    total: usize,
}

impl ParamLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| -> Span {
            let len = shape.iter().product();
            let span = Span { start: total, len };
            total += len;
            specs.push(TensorSpec { name, shape, span });
            span
        };
        let (m, d, ff, z, h, k) = (c.n_features, c.token_dim, c.ff_dim, c.z_dim, c.mlp_hidden, c.n_classes);
        let mut s = Spans {
            input_weights: push("input_weights".into(), vec![m]),
            tok_scale: push("tokenizer.scale".into(), vec![m, d]),
            tok_bias: push("tokenizer.bias".into(), vec![m, d]),
            col_emb: push("tokenizer.column_embeddings".into(), vec![m, d]),
            summary: push("tokenizer.summary_token".into(), vec![d]),
            ..Spans::default()
        };
        for l in 0..c.n_layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            s.blocks.push(BlockSpans {
                ln1_g: push(p("ln1.gain"), vec![d]),
                ln1_b: push(p("ln1.bias"), vec![d]),
                wq: push(p("attn.q.weight"), vec![d, d]),
                bq: push(p("attn.q.bias"), vec![d]),
                wk: push(p("attn.k.weight"), vec![d, d]),
                bk: push(p("attn.k.bias"), vec![d]),
                wv: push(p("attn.v.weight"), vec![d, d]),
                bv: push(p("attn.v.bias"), vec![d]),
                wo: push(p("attn.o.weight"), vec![d, d]),
                bo: push(p("attn.o.bias"), vec![d]),
                ln2_g: push(p("ln2.gain"), vec![d]),
                ln2_b: push(p("ln2.bias"), vec![d]),
                w1: push(p("ff.in.weight"), vec![d, ff]),
                b1: push(p("ff.in.bias"), vec![ff]),
                w2: push(p("ff.out.weight"), vec![ff, d]),
                b2: push(p("ff.out.bias"), vec![d]),
            });
        }
        s.lnf_g = push("encoder_norm.gain".into(), vec![d]);
        s.lnf_b = push("encoder_norm.bias".into(), vec![d]);
        s.proj_w = push("projection.weight".into(), vec![d, z]);
        s.proj_b = push("projection.bias".into(), vec![z]);
        s.dec_w = push("decoder.weight".into(), vec![z, m]);
        s.dec_b = push("decoder.bias".into(), vec![m]);
        s.cls_w1 = push("classifier.hidden.weight".into(), vec![z, h]);
        s.cls_b1 = push("classifier.hidden.bias".into(), vec![h]);
        s.cls_w2 = push("classifier.out.weight".into(), vec![h, k]);
        s.cls_b2 = push("classifier.out.bias".into(), vec![k]);
        s.ft_w = push("finetune_head.weight".into(), vec![z, k]);
        s.ft_b = push("finetune_head.bias".into(), vec![k]);
        Self { specs, spans: s, total }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Name of the tensor containing flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.specs.iter().find(|s| s.span.range().contains(&i)).map_or("?", |s| s.name.as_str())
    }

    pub fn input_weights(&self) -> Span {
        self.spans.input_weights
    }

    /// Spans of the classification head.
    pub fn classifier_spans(&self) -> [Span; 4] {
        let s = &self.spans;
        [s.cls_w1, s.cls_b1, s.cls_w2, s.cls_b2]
    }

    pub fn finetune_head_spans(&self) -> [Span; 2] {
        [self.spans.ft_w, self.spans.ft_b]
    }

    pub fn decoder_spans(&self) -> [Span; 2] {
        [self.spans.dec_w, self.spans.dec_b]
    }
}

/// Model weights plus their layout.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    config: ModelConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn fill_uniform<R: Rng + ?Sized>(dst: &mut [f64], bound: f64, rng: &mut R) {
    for v in dst {
        *v = rng.gen_range(-bound..=bound);
    }
}

impl ModelParameters {
    /// Input weights start at one, layer-norm gains at one, biases at zero and
    /// every weight matrix uniform in `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut v = vec![0.0; layout.total];
        let s = &layout.spans;
        let d = config.token_dim as f64;
        s.input_weights.of_mut(&mut v).fill(1.0);
        fill_uniform(s.tok_scale.of_mut(&mut v), 1.0, rng);
        fill_uniform(s.col_emb.of_mut(&mut v), 1.0 / libm::sqrt(d), rng);
        fill_uniform(s.summary.of_mut(&mut v), 1.0 / libm::sqrt(d), rng);
        for b in &s.blocks {
            b.ln1_g.of_mut(&mut v).fill(1.0);
            b.ln2_g.of_mut(&mut v).fill(1.0);
            for w in [b.wq, b.wk, b.wv, b.wo, b.w1] {
                fill_uniform(w.of_mut(&mut v), 1.0 / libm::sqrt(d), rng);
            }
            fill_uniform(b.w2.of_mut(&mut v), 1.0 / libm::sqrt(config.ff_dim as f64), rng);
        }
        s.lnf_g.of_mut(&mut v).fill(1.0);
        fill_uniform(s.proj_w.of_mut(&mut v), 1.0 / libm::sqrt(d), rng);
        let zf = config.z_dim as f64;
        fill_uniform(s.dec_w.of_mut(&mut v), 1.0 / libm::sqrt(zf), rng);
        fill_uniform(s.cls_w1.of_mut(&mut v), 1.0 / libm::sqrt(zf), rng);
        fill_uniform(s.cls_w2.of_mut(&mut v), 1.0 / libm::sqrt(config.mlp_hidden as f64), rng);
        fill_uniform(s.ft_w.of_mut(&mut v), 1.0 / libm::sqrt(zf), rng);
        Ok(Self { config, layout, values: v })
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint).
    pub fn from_tensors<'a, I>(config: ModelConfig, tensors: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
    {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut values = vec![0.0; layout.total];
        let mut seen = vec![false; layout.specs.len()];
        for (name, shape, data) in tensors {
            let idx = layout
                .specs
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| ModelError::UnknownTensor(name.into()))?;
            let spec = &layout.specs[idx];
            if spec.shape.as_slice() != shape || data.len() != spec.span.len {
                return Err(ModelError::TensorShape {
                    name: name.into(),
                    expected: spec.shape.clone(),
                    actual: shape.into(),
                });
            }
            spec.span.of_mut(&mut values).copy_from_slice(data);
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::UnknownTensor(format!("{} (missing)", layout.specs[i].name)));
        }
        Ok(Self { config, layout, values })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| s.span.of(&self.values))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let span = self.layout.find(name)?.span;
        Some(span.of_mut(&mut self.values))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorSpec, &[f64])> {
        self.layout.specs.iter().map(move |s| (s, s.span.of(&self.values)))
    }

    pub fn input_weights(&self) -> &[f64] {
        self.layout.spans.input_weights.of(&self.values)
    }

    /// Re-draws the fine-tune head (`±1/√z_dim` weights, zero bias).
    pub fn reset_finetune_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let s = &self.layout.spans;
        fill_uniform(s.ft_w.of_mut(&mut self.values), 1.0 / libm::sqrt(self.config.z_dim as f64), rng);
        s.ft_b.of_mut(&mut self.values).fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over the config dimensions and the raw parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let c = &self.config;
        for d in [c.n_features, c.token_dim, c.n_layers, c.n_heads, c.ff_dim, c.z_dim, c.mlp_hidden, c.n_classes] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Elementwise `x ∘ w`.
pub fn apply_input_weights(x: &[f64], w: &[f64]) -> Result<Vec<f64>, ModelError> {
    if x.len() != w.len() {
        return Err(ModelError::LengthMismatch { expected: w.len(), actual: x.len() });
    }
    Ok(x.iter().zip(w).map(|(a, b)| a * b).collect())
}

/// Returns the unit vector along `z` and whether `z` was zero (in which
/// case it is returned unchanged).
pub fn l2_normalize(z: &[f64]) -> (Vec<f64>, bool) {
    let r = crate::linalg::norm2(z);
    if r == 0.0 {
        return (z.to_vec(), true);
    }
    (z.iter().map(|v| v / r).collect(), false)
}

/// Vector-Jacobian product of [`l2_normalize`]: `(g − n (n·g)) / ‖z‖`.
pub fn l2_normalize_backward(z: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let r = crate::linalg::norm2(z);
    if r == 0.0 {
        return grad_out.to_vec();
    }
    let nd: f64 = z.iter().zip(grad_out).map(|(a, g)| a * g).sum::<f64>() / r;
    z.iter().zip(grad_out).map(|(a, g)| (g - a / r * nd) / r).collect()
}

/// Logistic function, clamped so the result stays strictly inside `(0, 1)`
/// even where it would round to an endpoint.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    let t = libm::tanh(GELU_K0 * (x + GELU_K1 * x * x * x));
    0.5 * x * (1.0 + t)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_K0 * (x + GELU_K1 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K0 * (1.0 + 3.0 * GELU_K1 * x * x)
}

#[derive(Debug, Clone)]
struct NormTrace {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormTrace) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / libm::sqrt(var + LN_EPS);
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, NormTrace { xhat, rstd })
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_backward(dy: &[f64], t: &NormTrace, d: usize, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64], dx: &mut [f64]) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &t.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let rs = t.rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

#[derive(Debug, Clone)]
struct BlockTrace {
    out_rows: usize,
    ln1: NormTrace,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × out_rows × tokens` attention probabilities.
    p: Vec<f64>,
    o: Vec<f64>,
    ln2: NormTrace,
    c: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
}

/// Intermediate values of one encoder pass, consumed by [`ModelParameters::encoder_backward`].
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Vec<f64>,
    weighted: Vec<f64>,
    blocks: Vec<BlockTrace>,
    lnf: NormTrace,
    s: Vec<f64>,
}

impl ModelParameters {
    fn block_forward(&self, b: &BlockSpans, h: &[f64], out_rows: usize) -> (Vec<f64>, BlockTrace) {
        let c = &self.config;
        let w = &self.values;
        let (d, t, ff, nh, dh) = (c.token_dim, h.len() / c.token_dim, c.ff_dim, c.n_heads, c.head_dim());
        let r = out_rows;
        let (a, ln1) = layer_norm(h, d, b.ln1_g.of(w), b.ln1_b.of(w));
        let mut q = vec![0.0; r * d];
        matmul(&a[..r * d], b.wq.of(w), &mut q, r, d, d);
        add_row_bias(&mut q, b.bq.of(w));
        let mut k = vec![0.0; t * d];
        matmul(&a, b.wk.of(w), &mut k, t, d, d);
        add_row_bias(&mut k, b.bk.of(w));
        let mut v = vec![0.0; t * d];
        matmul(&a, b.wv.of(w), &mut v, t, d, d);
        add_row_bias(&mut v, b.bv.of(w));

        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut p = vec![0.0; nh * r * t];
        let mut o = vec![0.0; r * d];
        for hh in 0..nh {
            let off = hh * dh;
            for i in 0..r {
                let qi = &q[i * d + off..i * d + off + dh];
                let pr = &mut p[(hh * r + i) * t..(hh * r + i + 1) * t];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..t {
                    let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                    pr[j] = s;
                    mx = mx.max(s);
                }
                let mut sum = 0.0;
                for pj in pr.iter_mut() {
                    *pj = libm::exp(*pj - mx);
                    sum += *pj;
                }
                let oi = &mut o[i * d + off..i * d + off + dh];
                for j in 0..t {
                    pr[j] /= sum;
                    let pj = pr[j];
                    for (ov, &vv) in oi.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *ov += pj * vv;
                    }
                }
            }
        }
        let mut h2 = h[..r * d].to_vec();
        matmul_acc(&o, b.wo.of(w), &mut h2, r, d, d);
        add_row_bias(&mut h2, b.bo.of(w));

        let (cn, ln2) = layer_norm(&h2, d, b.ln2_g.of(w), b.ln2_b.of(w));
        let mut f1 = vec![0.0; r * ff];
        matmul(&cn, b.w1.of(w), &mut f1, r, d, ff);
        add_row_bias(&mut f1, b.b1.of(w));
        let g: Vec<f64> = f1.iter().map(|&x| gelu(x)).collect();
        let mut h3 = h2;
        matmul_acc(&g, b.w2.of(w), &mut h3, r, ff, d);
        add_row_bias(&mut h3, b.b2.of(w));
        (h3, BlockTrace { out_rows: r, ln1, a, q, k, v, p, o, ln2, c: cn, f1, g })
    }

    fn block_backward(&self, b: &BlockSpans, tr: &BlockTrace, dh3: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let c = &self.config;
        let w = &self.values;
        let (d, ff, nh, dh) = (c.token_dim, c.ff_dim, c.n_heads, c.head_dim());
        let r = tr.out_rows;
        let t = tr.k.len() / d;

        // Feed-forward branch.
        matmul_at_b_acc(&tr.g, dh3, b.w2.of_mut(grads), r, ff, d);
        col_sum_acc(dh3, b.b2.of_mut(grads));
        let mut dgl = vec![0.0; r * ff];
        matmul_a_bt_acc(dh3, b.w2.of(w), &mut dgl, r, d, ff);
        for (dg, &x) in dgl.iter_mut().zip(&tr.f1) {
            *dg *= gelu_grad(x);
        }
        matmul_at_b_acc(&tr.c, &dgl, b.w1.of_mut(grads), r, d, ff);
        col_sum_acc(&dgl, b.b1.of_mut(grads));
        let mut dc = vec![0.0; r * d];
        matmul_a_bt_acc(&dgl, b.w1.of(w), &mut dc, r, ff, d);
        let mut dh2 = dh3.to_vec();
        {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            layer_norm_backward(&dc, &tr.ln2, d, b.ln2_g.of(w), &mut dg, &mut db, &mut dh2);
            add_into(b.ln2_g.of_mut(grads), &dg);
            add_into(b.ln2_b.of_mut(grads), &db);
        }

        // Attention branch.
        let mut dinput = vec![0.0; t * d];
        dinput[..r * d].copy_from_slice(&dh2);
        matmul_at_b_acc(&tr.o, &dh2, b.wo.of_mut(grads), r, d, d);
        col_sum_acc(&dh2, b.bo.of_mut(grads));
        let mut dout = vec![0.0; r * d];
        matmul_a_bt_acc(&dh2, b.wo.of(w), &mut dout, r, d, d);

        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut dq = vec![0.0; r * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for hh in 0..nh {
            let off = hh * dh;
            for i in 0..r {
                let doi = &dout[i * d + off..i * d + off + dh];
                let pr = &tr.p[(hh * r + i) * t..(hh * r + i + 1) * t];
                let mut acc = 0.0;
                for j in 0..t {
                    dp[j] = dot(doi, &tr.v[j * d + off..j * d + off + dh]);
                    acc += pr[j] * dp[j];
                    for (dvv, &g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                        *dvv += pr[j] * g;
                    }
                }
                let qi = &tr.q[i * d + off..i * d + off + dh];
                for j in 0..t {
                    let ds = pr[j] * (dp[j] - acc) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &tr.k[j * d + off..j * d + off + dh];
                    for (dqv, &kv) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *dqv += ds * kv;
                    }
                    for (dkv, &qv) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *dkv += ds * qv;
                    }
                }
            }
        }
        matmul_at_b_acc(&tr.a[..r * d], &dq, b.wq.of_mut(grads), r, d, d);
        col_sum_acc(&dq, b.bq.of_mut(grads));
        matmul_at_b_acc(&tr.a, &dk, b.wk.of_mut(grads), t, d, d);
        col_sum_acc(&dk, b.bk.of_mut(grads));
        matmul_at_b_acc(&tr.a, &dv, b.wv.of_mut(grads), t, d, d);
        col_sum_acc(&dv, b.bv.of_mut(grads));
        let mut da = vec![0.0; t * d];
        matmul_a_bt_acc(&dk, b.wk.of(w), &mut da, t, d, d);
        matmul_a_bt_acc(&dv, b.wv.of(w), &mut da, t, d, d);
        matmul_a_bt_acc(&dq, b.wq.of(w), &mut da[..r * d], r, d, d);
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        layer_norm_backward(&da, &tr.ln1, d, b.ln1_g.of(w), &mut dg, &mut db, &mut dinput);
        add_into(b.ln1_g.of_mut(grads), &dg);
        add_into(b.ln1_b.of_mut(grads), &db);
        dinput
    }

    /// Encodes one (already corrupted) input row into the bottleneck `z`,
    /// keeping what the backward pass needs.
    pub fn encode_traced(&self, x: &[f64]) -> Result<(Vec<f64>, EncoderTrace), ModelError> {
        let c = &self.config;
        let s = &self.layout.spans;
        let w = &self.values;
        let (m, d) = (c.n_features, c.token_dim);
        let weighted = apply_input_weights(x, s.input_weights.of(w))?;

        let mut h = vec![0.0; (m + 1) * d];
        h[..d].copy_from_slice(s.summary.of(w));
        let (scale, bias, col) = (s.tok_scale.of(w), s.tok_bias.of(w), s.col_emb.of(w));
        for j in 0..m {
            let u = weighted[j];
            let row = &mut h[(j + 1) * d..(j + 2) * d];
            for e in 0..d {
                row[e] = u * scale[j * d + e] + bias[j * d + e] + col[j * d + e];
            }
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { layer: 0 });
        }

        let mut blocks = Vec::with_capacity(c.n_layers);
        for (l, b) in s.blocks.iter().enumerate() {
            let out_rows = if l + 1 == c.n_layers { 1 } else { m + 1 };
            let (next, tr) = self.block_forward(b, &h, out_rows);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite { layer: l + 1 });
            }
            blocks.push(tr);
            h = next;
        }
        let (sn, lnf) = layer_norm(&h[..d], d, s.lnf_g.of(w), s.lnf_b.of(w));
        let mut z = s.proj_b.of(w).to_vec();
        matmul_acc(&sn, s.proj_w.of(w), &mut z, 1, d, c.z_dim);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { layer: c.n_layers + 1 });
        }
        Ok((z, EncoderTrace { input: x.to_vec(), weighted, blocks, lnf, s: sn }))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.encode_traced(x).map(|(z, _)| z)
    }

    /// Accumulates `∂L/∂θ` for every encoder parameter (input weights,
    /// tokenizer, blocks, final norm, projection) given `∂L/∂z`.
    pub fn encoder_backward(&self, tr: &EncoderTrace, dz: &[f64], grads: &mut [f64]) {
        let c = &self.config;
        let s = &self.layout.spans;
        let w = &self.values;
        let (m, d) = (c.n_features, c.token_dim);

        matmul_at_b_acc(&tr.s, dz, s.proj_w.of_mut(grads), 1, d, c.z_dim);
        add_into(s.proj_b.of_mut(grads), dz);
        let mut ds = vec![0.0; d];
        matmul_a_bt_acc(dz, s.proj_w.of(w), &mut ds, 1, c.z_dim, d);
        let mut dh = vec![0.0; d];
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        layer_norm_backward(&ds, &tr.lnf, d, s.lnf_g.of(w), &mut dg, &mut db, &mut dh);
        add_into(s.lnf_g.of_mut(grads), &dg);
        add_into(s.lnf_b.of_mut(grads), &db);

        for (b, bt) in s.blocks.iter().zip(&tr.blocks).rev() {
            dh = self.block_backward(b, bt, &dh, grads);
        }

        add_into(s.summary.of_mut(grads), &dh[..d]);
        let scale = s.tok_scale.of(w);
        for j in 0..m {
            let g = &dh[(j + 1) * d..(j + 2) * d];
            let u = tr.weighted[j];
            let mut du = 0.0;
            {
                let gs = s.tok_scale.of_mut(grads);
                for e in 0..d {
                    gs[j * d + e] += u * g[e];
                    du += scale[j * d + e] * g[e];
                }
            }
            add_into(&mut s.tok_bias.of_mut(grads)[j * d..(j + 1) * d], g);
            add_into(&mut s.col_emb.of_mut(grads)[j * d..(j + 1) * d], g);
            s.input_weights.of_mut(grads)[j] += tr.input[j] * du;
        }
    }

    /// `sigmoid(A z + a)`; every component lies in `(0, 1)`.
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.layout.spans;
        let w = &self.values;
        let mut pre = s.dec_b.of(w).to_vec();
        matmul_acc(z, s.dec_w.of(w), &mut pre, 1, self.config.z_dim, self.config.n_features);
        pre.iter().map(|&v| sigmoid(v)).collect()
    }

    /// Given the decoder output and `∂L/∂x̂`, accumulates decoder gradients
    /// and returns `∂L/∂z`.
    pub fn decoder_backward(&self, z: &[f64], xhat: &[f64], dxhat: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let s = &self.layout.spans;
        let (zd, m) = (self.config.z_dim, self.config.n_features);
        let dpre: Vec<f64> = xhat.iter().zip(dxhat).map(|(&y, &g)| g * y * (1.0 - y)).collect();
        matmul_at_b_acc(z, &dpre, s.dec_w.of_mut(grads), 1, zd, m);
        add_into(s.dec_b.of_mut(grads), &dpre);
        let mut dz = vec![0.0; zd];
        matmul_a_bt_acc(&dpre, s.dec_w.of(&self.values), &mut dz, 1, m, zd);
        dz
    }

    fn classifier_hidden(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.layout.spans;
        let mut pre = s.cls_b1.of(&self.values).to_vec();
        matmul_acc(z, s.cls_w1.of(&self.values), &mut pre, 1, self.config.z_dim, self.config.mlp_hidden);
        pre
    }

    /// Logits of the shared two-layer classification head.
    pub fn classify(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.layout.spans;
        let hid: Vec<f64> = self.classifier_hidden(z).into_iter().map(gelu).collect();
        let mut out = s.cls_b2.of(&self.values).to_vec();
        matmul_acc(&hid, s.cls_w2.of(&self.values), &mut out, 1, self.config.mlp_hidden, self.config.n_classes);
        out
    }

    pub fn classifier_backward(&self, z: &[f64], dlogits: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let s = &self.layout.spans;
        let w = &self.values;
        let (zd, hd, k) = (self.config.z_dim, self.config.mlp_hidden, self.config.n_classes);
        let pre = self.classifier_hidden(z);
        let hid: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        matmul_at_b_acc(&hid, dlogits, s.cls_w2.of_mut(grads), 1, hd, k);
        add_into(s.cls_b2.of_mut(grads), dlogits);
        let mut dh = vec![0.0; hd];
        matmul_a_bt_acc(dlogits, s.cls_w2.of(w), &mut dh, 1, k, hd);
        for (g, &p) in dh.iter_mut().zip(&pre) {
            *g *= gelu_grad(p);
        }
        matmul_at_b_acc(z, &dh, s.cls_w1.of_mut(grads), 1, zd, hd);
        add_into(s.cls_b1.of_mut(grads), &dh);
        let mut dz = vec![0.0; zd];
        matmul_a_bt_acc(&dh, s.cls_w1.of(w), &mut dz, 1, hd, zd);
        dz
    }

    /// Logits of the linear fine-tune head.
    pub fn finetune_logits(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.layout.spans;
        let mut out = s.ft_b.of(&self.values).to_vec();
        matmul_acc(z, s.ft_w.of(&self.values), &mut out, 1, self.config.z_dim, self.config.n_classes);
        out
    }

    pub fn finetune_backward(&self, z: &[f64], dlogits: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let s = &self.layout.spans;
        let (zd, k) = (self.config.z_dim, self.config.n_classes);
        matmul_at_b_acc(z, dlogits, s.ft_w.of_mut(grads), 1, zd, k);
        add_into(s.ft_b.of_mut(grads), dlogits);
        let mut dz = vec![0.0; zd];
        matmul_a_bt_acc(dlogits, s.ft_w.of(&self.values), &mut dz, 1, k, zd);
        dz
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
