//! A small pre-layer-norm transformer language model with learned absolute
//! position embeddings and a hand-written backward pass.
//!
//! Every sequence is internally prefixed with `<bos>`. Each input position
//! carries a next-token target; the position holding the last real token
//! predicts `<bos>` as an end-of-sequence marker, so all embedded positions
//! receive gradient. Pad positions are excluded from the loss entirely, which
//! keeps pad embeddings at exactly zero gradient.
//!
//! With untied embeddings (the default) the word-embedding matrix only enters
//! the computation through row lookups, so the nonzero rows of its gradient
//! are exactly the token ids present in the batch.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, TokenId, BOS_ID};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub tie_embeddings: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            vocab_size: 8192,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_positions: 41,
            tie_embeddings: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig("vocab_size must be >= 4".into()));
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} must be divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.max_positions < 41 {
            return Err(Error::InvalidConfig(
                "max_positions must be >= 41 (40-token sentences plus bos)".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// Gain/offset pair; doubles as the gradient holder for a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    fn ones(d: usize) -> Self {
        LayerNormParams {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        LayerNormParams {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }
}

/// One transformer block; doubles as the gradient holder for a block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array1<f64>,
    pub bk: Array1<f64>,
    pub bv: Array1<f64>,
    pub bo: Array1<f64>,
    pub ln2: LayerNormParams,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl LayerParams {
    fn zeros(hyper: &Hyperparams) -> Self {
        let d = hyper.hidden_dim;
        let f = hyper.mlp_dim();
        LayerParams {
            ln1: LayerNormParams::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            bk: Array1::zeros(d),
            bv: Array1::zeros(d),
            bo: Array1::zeros(d),
            ln2: LayerNormParams::zeros(d),
            w_in: Array2::zeros((d, f)),
            b_in: Array1::zeros(f),
            w_out: Array2::zeros((f, d)),
            b_out: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyperparams,
    /// |V| x d word embeddings.
    pub w_embed: Array2<f64>,
    /// max_positions x d position embeddings.
    pub p_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f: LayerNormParams,
    /// d x |V| output head; `None` when embeddings are tied.
    pub u_out: Option<Array2<f64>>,
}

/// Same tensor layout as [`ModelParams`], one gradient per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_embed: Array2<f64>,
    pub p_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f: LayerNormParams,
    pub u_out: Option<Array2<f64>>,
}

/// Borrowed view of one named tensor.
#[derive(Clone, Copy)]
pub enum TensorRef<'a> {
    One(&'a Array1<f64>),
    Two(&'a Array2<f64>),
}

pub enum TensorMut<'a> {
    One(&'a mut Array1<f64>),
    Two(&'a mut Array2<f64>),
}

impl<'a> TensorRef<'a> {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorRef::One(a) => vec![a.len()],
            TensorRef::Two(a) => a.shape().to_vec(),
        }
    }

    pub fn as_slice(&self) -> &'a [f64] {
        match self {
            TensorRef::One(a) => a.as_slice().expect("standard layout"),
            TensorRef::Two(a) => a.as_slice().expect("standard layout"),
        }
    }
}

impl<'a> TensorMut<'a> {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorMut::One(a) => vec![a.len()],
            TensorMut::Two(a) => a.shape().to_vec(),
        }
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        match self {
            TensorMut::One(a) => a.as_slice_mut().expect("standard layout"),
            TensorMut::Two(a) => a.as_slice_mut().expect("standard layout"),
        }
    }
}

macro_rules! collect_tensors {
    ($out:ident, $ref:ident, $w:expr, $p:expr, $layers:expr, $ln_f:expr, $u:expr) => {{
        let mut $out = Vec::new();
        $out.push(("w".to_string(), TensorRef_or_mut!($ref, Two, $w)));
        $out.push(("p".to_string(), TensorRef_or_mut!($ref, Two, $p)));
        for (i, l) in $layers.into_iter().enumerate() {
            $out.push((format!("layer{i}.ln1.g"), TensorRef_or_mut!($ref, One, l.ln1.gain)));
            $out.push((format!("layer{i}.ln1.b"), TensorRef_or_mut!($ref, One, l.ln1.bias)));
            $out.push((format!("layer{i}.wq"), TensorRef_or_mut!($ref, Two, l.wq)));
            $out.push((format!("layer{i}.wk"), TensorRef_or_mut!($ref, Two, l.wk)));
            $out.push((format!("layer{i}.wv"), TensorRef_or_mut!($ref, Two, l.wv)));
            $out.push((format!("layer{i}.wo"), TensorRef_or_mut!($ref, Two, l.wo)));
            $out.push((format!("layer{i}.bq"), TensorRef_or_mut!($ref, One, l.bq)));
            $out.push((format!("layer{i}.bk"), TensorRef_or_mut!($ref, One, l.bk)));
            $out.push((format!("layer{i}.bv"), TensorRef_or_mut!($ref, One, l.bv)));
            $out.push((format!("layer{i}.bo"), TensorRef_or_mut!($ref, One, l.bo)));
            $out.push((format!("layer{i}.ln2.g"), TensorRef_or_mut!($ref, One, l.ln2.gain)));
            $out.push((format!("layer{i}.ln2.b"), TensorRef_or_mut!($ref, One, l.ln2.bias)));
            $out.push((format!("layer{i}.w_in"), TensorRef_or_mut!($ref, Two, l.w_in)));
            $out.push((format!("layer{i}.b_in"), TensorRef_or_mut!($ref, One, l.b_in)));
            $out.push((format!("layer{i}.w_out"), TensorRef_or_mut!($ref, Two, l.w_out)));
            $out.push((format!("layer{i}.b_out"), TensorRef_or_mut!($ref, One, l.b_out)));
        }
        $out.push(("ln_f.g".to_string(), TensorRef_or_mut!($ref, One, $ln_f.gain)));
        $out.push(("ln_f.b".to_string(), TensorRef_or_mut!($ref, One, $ln_f.bias)));
        if let Some(u) = $u {
            $out.push(("u".to_string(), tensor_wrap!($ref, Two, u)));
        }
        $out
    }};
}

macro_rules! TensorRef_or_mut {
    (imm, $variant:ident, $e:expr) => {
        TensorRef::$variant(&$e)
    };
    (mut, $variant:ident, $e:expr) => {
        TensorMut::$variant(&mut $e)
    };
}

/// Like `TensorRef_or_mut` but for expressions that are already references.
macro_rules! tensor_wrap {
    (imm, $variant:ident, $e:expr) => {
        TensorRef::$variant($e)
    };
    (mut, $variant:ident, $e:expr) => {
        TensorMut::$variant($e)
    };
}

impl ModelParams {
    /// Tensors in canonical order (the order used for checkpoints, pruning
    /// tie-breaks, and optimizer state pairing).
    pub fn named_tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        collect_tensors!(
            out,
            imm,
            self.w_embed,
            self.p_embed,
            &self.layers,
            self.ln_f,
            self.u_out.as_ref()
        )
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        collect_tensors!(
            out,
            mut,
            self.w_embed,
            self.p_embed,
            &mut self.layers,
            self.ln_f,
            self.u_out.as_mut()
        )
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.as_slice().len())
            .sum()
    }

    /// Adds `delta` to the parameter at global flat index `idx` (canonical
    /// tensor order, row-major within each tensor).
    pub fn perturb_flat(&mut self, idx: usize, delta: f64) {
        let mut offset = 0;
        for (_, mut t) in self.named_tensors_mut() {
            let sl = t.as_slice_mut();
            if idx < offset + sl.len() {
                sl[idx - offset] += delta;
                return;
            }
            offset += sl.len();
        }
        panic!("flat index {idx} out of range");
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Gradients {
        let h = &params.hyper;
        Gradients {
            w_embed: Array2::zeros((h.vocab_size, h.hidden_dim)),
            p_embed: Array2::zeros((h.max_positions, h.hidden_dim)),
            layers: (0..h.n_layers).map(|_| LayerParams::zeros(h)).collect(),
            ln_f: LayerNormParams::zeros(h.hidden_dim),
            u_out: if h.tie_embeddings {
                None
            } else {
                Some(Array2::zeros((h.hidden_dim, h.vocab_size)))
            },
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        collect_tensors!(
            out,
            imm,
            self.w_embed,
            self.p_embed,
            &self.layers,
            self.ln_f,
            self.u_out.as_ref()
        )
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        collect_tensors!(
            out,
            mut,
            self.w_embed,
            self.p_embed,
            &mut self.layers,
            self.ln_f,
            self.u_out.as_mut()
        )
    }

    pub fn total_entries(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.as_slice().len())
            .sum()
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut offset = 0;
        for (_, t) in self.named_tensors() {
            let sl = t.as_slice();
            if idx < offset + sl.len() {
                return sl[idx - offset];
            }
            offset += sl.len();
        }
        panic!("flat index {idx} out of range");
    }

    /// Global L2 norm over all tensors.
    pub fn l2_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, mut t) in self.named_tensors_mut() {
            for v in t.as_slice_mut() {
                *v *= s;
            }
        }
    }

    /// `self += s * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) -> Result<()> {
        let theirs = other.named_tensors();
        for ((_, mut a), (_, b)) in self.named_tensors_mut().into_iter().zip(theirs) {
            let a = a.as_slice_mut();
            let b = b.as_slice();
            if a.len() != b.len() {
                return Err(Error::ShapeError("gradient tensor size mismatch".into()));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.as_slice().iter().all(|v| v.is_finite()))
    }
}

/// Initializes parameters with N(0, 0.02^2) weights, unit layer-norm gains and
/// zero offsets. Deterministic for a fixed generator state.
pub fn init_params<R: Rng>(hyper: &Hyperparams, rng: &mut R) -> Result<ModelParams> {
    hyper.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid distribution");
    let d = hyper.hidden_dim;
    let f = hyper.mlp_dim();
    let draw2 = |r: usize, c: usize, rng: &mut R| -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || normal.sample(rng))
    };
    let w_embed = draw2(hyper.vocab_size, d, rng);
    let p_embed = draw2(hyper.max_positions, d, rng);
    let mut layers = Vec::with_capacity(hyper.n_layers);
    for _ in 0..hyper.n_layers {
        layers.push(LayerParams {
            ln1: LayerNormParams::ones(d),
            wq: draw2(d, d, rng),
            wk: draw2(d, d, rng),
            wv: draw2(d, d, rng),
            wo: draw2(d, d, rng),
            bq: Array1::from_shape_simple_fn(d, || normal.sample(rng)),
            bk: Array1::from_shape_simple_fn(d, || normal.sample(rng)),
            bv: Array1::from_shape_simple_fn(d, || normal.sample(rng)),
            bo: Array1::from_shape_simple_fn(d, || normal.sample(rng)),
            ln2: LayerNormParams::ones(d),
            w_in: draw2(d, f, rng),
            b_in: Array1::from_shape_simple_fn(f, || normal.sample(rng)),
            w_out: draw2(f, d, rng),
            b_out: Array1::from_shape_simple_fn(d, || normal.sample(rng)),
        });
    }
    let ln_f = LayerNormParams::ones(d);
    let u_out = if hyper.tie_embeddings {
        None
    } else {
        Some(draw2(d, hyper.vocab_size, rng))
    };
    Ok(ModelParams {
        hyper: *hyper,
        w_embed,
        p_embed,
        layers,
        ln_f,
        u_out,
    })
}

// ---------------------------------------------------------------------------
// Forward pass

struct LnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    n2: Array2<f64>,
    u1: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    h: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let m = x.nrows();
    let d = x.ncols();
    let mut out = Array2::zeros((m, d));
    let mut x_hat = Array2::zeros((m, d));
    let mut inv_std = Array1::zeros(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            x_hat[[i, j]] = xh;
            out[[i, j]] = ln.gain[j] * xh + ln.bias[j];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    ln: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    let m = d_out.nrows();
    let d = d_out.ncols();
    let mut dx = Array2::zeros((m, d));
    for i in 0..m {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dy = d_out[[i, j]];
            grad.gain[j] += dy * cache.x_hat[[i, j]];
            grad.bias[j] += dy;
            let dxh = dy * ln.gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.x_hat[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = d_out[[i, j]] * ln.gain[j];
            dx[[i, j]] =
                cache.inv_std[i] * (dxh - mean_dxhat - cache.x_hat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Causal multi-head attention over the already-normalized input `n1`.
fn attention_forward(
    n1: &Array2<f64>,
    layer: &LayerParams,
    hyper: &Hyperparams,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Vec<Array2<f64>>, Array2<f64>) {
    let m = n1.nrows();
    let d = hyper.hidden_dim;
    let dk = hyper.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let q = n1.dot(&layer.wq) + &layer.bq;
    let k = n1.dot(&layer.wk) + &layer.bk;
    let v = n1.dot(&layer.wv) + &layer.bv;

    let mut ctx = Array2::zeros((m, d));
    let mut probs = Vec::with_capacity(hyper.n_heads);
    for h in 0..hyper.n_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut a = Array2::zeros((m, m));
        for i in 0..m {
            // Causal: position i attends to 0..=i.
            let mut max = f64::NEG_INFINITY;
            let mut scores = vec![0.0; i + 1];
            for j in 0..=i {
                let sc = qh.row(i).dot(&kh.row(j)) * scale;
                scores[j] = sc;
                if sc > max {
                    max = sc;
                }
            }
            let mut denom = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                denom += *sc;
            }
            for j in 0..=i {
                a[[i, j]] = scores[j] / denom;
            }
        }
        let ctx_h = a.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        probs.push(a);
    }
    let out = ctx.dot(&layer.wo) + &layer.bo;
    (out, q, k, v, probs, ctx)
}

fn forward_seq(params: &ModelParams, ids: &[usize]) -> Result<(Array2<f64>, ForwardCache)> {
    let hyper = &params.hyper;
    let m = ids.len();
    if m == 0 {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    if m > hyper.max_positions {
        return Err(Error::SequenceTooLong {
            got: m,
            limit: hyper.max_positions,
        });
    }
    let d = hyper.hidden_dim;
    let mut x = Array2::zeros((m, d));
    for (i, &id) in ids.iter().enumerate() {
        let row = &params.w_embed.row(id) + &params.p_embed.row(i);
        x.row_mut(i).assign(&row);
    }

    let mut layer_caches = Vec::with_capacity(hyper.n_layers);
    for layer in &params.layers {
        let (n1, ln1) = layer_norm(&x, &layer.ln1);
        let (attn_out, q, k, v, probs, ctx) = attention_forward(&n1, layer, hyper);
        let a = &x + &attn_out;
        let (n2, ln2) = layer_norm(&a, &layer.ln2);
        let u1 = n2.dot(&layer.w_in) + &layer.b_in;
        let g = u1.mapv(gelu);
        let mlp_out = g.dot(&layer.w_out) + &layer.b_out;
        x = &a + &mlp_out;
        layer_caches.push(LayerCache {
            ln1,
            n1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            n2,
            u1,
            g,
        });
    }

    let (h, ln_f) = layer_norm(&x, &params.ln_f);
    let logits = match &params.u_out {
        Some(u) => h.dot(u),
        None => h.dot(&params.w_embed.t()),
    };
    Ok((
        logits,
        ForwardCache {
            ids: ids.to_vec(),
            layers: layer_caches,
            ln_f,
            h,
        },
    ))
}

fn backward_seq(
    params: &ModelParams,
    cache: &ForwardCache,
    d_logits: &Array2<f64>,
    grads: &mut Gradients,
) {
    let hyper = &params.hyper;
    let m = cache.ids.len();
    let dk = hyper.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    // Output head.
    let mut dh = match &params.u_out {
        Some(u) => {
            let du = grads.u_out.as_mut().expect("untied gradients");
            *du += &cache.h.t().dot(d_logits);
            d_logits.dot(&u.t())
        }
        None => {
            grads.w_embed += &d_logits.t().dot(&cache.h);
            d_logits.dot(&params.w_embed)
        }
    };

    let mut dx = layer_norm_backward(&dh, &cache.ln_f, &params.ln_f, &mut grads.ln_f);
    dh = Array2::zeros((0, 0));
    let _ = dh;

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // MLP branch: x_out = a + gelu(ln2(a) W_in + b_in) W_out + b_out
        let d_mlp_out = &dx; // residual: d(a) accumulates below
        lg.b_out += &d_mlp_out.sum_axis(Axis(0));
        lg.w_out += &lc.g.t().dot(d_mlp_out);
        let dg = d_mlp_out.dot(&layer.w_out.t());
        let du1 = &dg * &lc.u1.mapv(gelu_prime);
        lg.b_in += &du1.sum_axis(Axis(0));
        lg.w_in += &lc.n2.t().dot(&du1);
        let dn2 = du1.dot(&layer.w_in.t());
        let da_from_mlp = layer_norm_backward(&dn2, &lc.ln2, &layer.ln2, &mut lg.ln2);
        let da = &dx + &da_from_mlp;

        // Attention branch: a = x + ctx W_o + b_o
        lg.bo += &da.sum_axis(Axis(0));
        lg.wo += &lc.ctx.t().dot(&da);
        let dctx = da.dot(&layer.wo.t());

        let mut dq = Array2::zeros((m, hyper.hidden_dim));
        let mut dkk = Array2::zeros((m, hyper.hidden_dim));
        let mut dv = Array2::zeros((m, hyper.hidden_dim));
        for h in 0..hyper.n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let vh = lc.v.slice(cols);
            let a_probs = &lc.probs[h];
            let dctx_h = dctx.slice(cols);

            // dA = dctx . V^T ; dV = A^T . dctx
            let da_probs = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&a_probs.t().dot(&dctx_h));

            // Softmax backward per row (masked entries have prob 0 -> dS 0).
            let mut ds = Array2::zeros((m, m));
            for i in 0..m {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += da_probs[[i, j]] * a_probs[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = a_probs[[i, j]] * (da_probs[[i, j]] - dot);
                }
            }

            let dqh = ds.dot(&kh).mapv(|v| v * scale);
            let dkh = ds.t().dot(&qh).mapv(|v| v * scale);
            dq.slice_mut(cols).assign(&dqh);
            dkk.slice_mut(cols).assign(&dkh);
        }

        lg.bq += &dq.sum_axis(Axis(0));
        lg.bk += &dkk.sum_axis(Axis(0));
        lg.bv += &dv.sum_axis(Axis(0));
        lg.wq += &lc.n1.t().dot(&dq);
        lg.wk += &lc.n1.t().dot(&dkk);
        lg.wv += &lc.n1.t().dot(&dv);
        let dn1 = dq.dot(&layer.wq.t()) + dkk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        let dx_from_attn = layer_norm_backward(&dn1, &lc.ln1, &layer.ln1, &mut lg.ln1);
        dx = da + dx_from_attn;
    }

    // Embeddings.
    for (i, &id) in cache.ids.iter().enumerate() {
        let drow = dx.row(i);
        let mut w_row = grads.w_embed.row_mut(id);
        w_row += &drow;
        let mut p_row = grads.p_embed.row_mut(i);
        p_row += &drow;
    }
}

fn softmax_row(logits: &ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let denom = out.sum();
    out.mapv_inplace(|v| v / denom);
    out
}

/// Probability distribution over the vocabulary for the token following
/// `prefix`. The `<bos>` token is prepended internally.
pub fn next_token_dist(params: &ModelParams, prefix: &[TokenId]) -> Result<Array1<f64>> {
    if prefix.is_empty() {
        return Err(Error::InvalidInput("prefix must be non-empty".into()));
    }
    next_token_dist_with_bos(params, prefix)
}

/// Same as [`next_token_dist`] but allows an empty prefix (distribution of the
/// first token, conditioned only on `<bos>`).
pub fn next_token_dist_with_bos(params: &ModelParams, prefix: &[TokenId]) -> Result<Array1<f64>> {
    let ids: Vec<usize> = std::iter::once(BOS_ID as usize)
        .chain(prefix.iter().map(|&t| t as usize))
        .collect();
    let (logits, _) = forward_seq(params, &ids)?;
    Ok(softmax_row(&logits.row(logits.nrows() - 1)))
}

/// Sum over positions of log p(x_i | x_1..x_{i-1}), with `<bos>` as the
/// conditioning context for the first token. Always <= 0.
pub fn sentence_logprob(params: &ModelParams, tokens: &[TokenId]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty sentence".into()));
    }
    let ids: Vec<usize> = std::iter::once(BOS_ID as usize)
        .chain(tokens.iter().map(|&t| t as usize))
        .collect();
    let (logits, _) = forward_seq(params, &ids)?;
    let mut lp = 0.0;
    for (i, &t) in tokens.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        lp += logits[[i, t as usize]] - logsum;
    }
    if !lp.is_finite() {
        return Err(Error::NumericalFailure("non-finite log-probability".into()));
    }
    Ok(lp)
}

/// exp(-logprob / n) where n is the token count; >= 1 up to rounding.
pub fn perplexity(params: &ModelParams, tokens: &[TokenId]) -> Result<f64> {
    let lp = sentence_logprob(params, tokens)?;
    Ok((-lp / tokens.len() as f64).exp())
}

/// Mean next-token cross-entropy over all non-pad positions, and its exact
/// analytic gradient. Every embedded position carries a target; the position
/// of the final real token predicts `<bos>` as the end marker.
pub fn loss_and_gradients(params: &ModelParams, batch: &Batch) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let n_total: usize = batch.lengths.iter().map(|l| l + 1).sum();
    if n_total == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let inv_n = 1.0 / n_total as f64;
    let mut loss = 0.0;
    for (row, &len) in batch.rows.iter().zip(&batch.lengths) {
        let tokens = &row[..len];
        let ids: Vec<usize> = std::iter::once(BOS_ID as usize)
            .chain(tokens.iter().map(|&t| t as usize))
            .collect();
        // Target at position i is ids[i+1]; the final position targets <bos>.
        let targets: Vec<usize> = ids[1..]
            .iter()
            .copied()
            .chain(std::iter::once(BOS_ID as usize))
            .collect();
        let (logits, cache) = forward_seq(params, &ids)?;
        let m = ids.len();
        let mut d_logits = Array2::zeros((m, params.hyper.vocab_size));
        for i in 0..m {
            let p = softmax_row(&logits.row(i));
            loss -= (p[targets[i]].max(f64::MIN_POSITIVE)).ln() * inv_n;
            let mut drow = d_logits.row_mut(i);
            drow.assign(&p.mapv(|v| v * inv_n));
            drow[targets[i]] -= inv_n;
        }
        backward_seq(params, &cache, &d_logits, &mut grads);
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NumericalFailure("non-finite loss or gradients".into()));
    }
    Ok((loss, grads))
}

/// Per-example gradients: one [`Gradients`] per batch member, each computed on
/// the single-sentence loss (used by the DPSGD defense).
pub fn per_example_gradients(params: &ModelParams, batch: &Batch) -> Result<Vec<Gradients>> {
    batch
        .member_sentences
        .iter()
        .map(|s| {
            let single = Batch::from_sentences(vec![s.clone()]);
            loss_and_gradients(params, &single).map(|(_, g)| g)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub freeze_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            iterations: 0,
            batch_size: 1,
            freeze_embeddings: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Owns the optimizer state (Adam moments) across update steps.
pub struct Optimizer {
    config: TrainConfig,
    step_count: u64,
    moments: Option<(Gradients, Gradients)>,
}

impl Optimizer {
    pub fn new(config: TrainConfig) -> Optimizer {
        Optimizer {
            config,
            step_count: 0,
            moments: None,
        }
    }

    /// Applies one update in place. W and P are left untouched when
    /// `freeze_embeddings` is set.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let lr = self.config.learning_rate;
        let freeze = self.config.freeze_embeddings;
        match self.config.optimizer {
            OptimizerKind::Sgd => {
                let gs = grads.named_tensors();
                for ((name, mut p), (gname, g)) in
                    params.named_tensors_mut().into_iter().zip(gs)
                {
                    if name != gname || p.dims() != g.dims() {
                        return Err(Error::ShapeError(format!(
                            "parameter/gradient mismatch at {name}"
                        )));
                    }
                    if freeze && (name == "w" || name == "p") {
                        continue;
                    }
                    for (x, dg) in p.as_slice_mut().iter_mut().zip(g.as_slice()) {
                        *x -= lr * dg;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.moments.is_none() {
                    self.moments = Some((Gradients::zeros_like(params), Gradients::zeros_like(params)));
                }
                self.step_count += 1;
                let t = self.step_count as f64;
                let bc1 = 1.0 - ADAM_BETA1.powf(t);
                let bc2 = 1.0 - ADAM_BETA2.powf(t);
                let (m, v) = self.moments.as_mut().unwrap();
                let gs = grads.named_tensors();
                let ms = m.named_tensors_mut();
                let vs = v.named_tensors_mut();
                for ((((name, mut p), (gname, g)), (_, mut mi)), (_, mut vi)) in params
                    .named_tensors_mut()
                    .into_iter()
                    .zip(gs)
                    .zip(ms)
                    .zip(vs)
                {
                    if name != gname || p.dims() != g.dims() {
                        return Err(Error::ShapeError(format!(
                            "parameter/gradient mismatch at {name}"
                        )));
                    }
                    let skip = freeze && (name == "w" || name == "p");
                    let p = p.as_slice_mut();
                    let g = g.as_slice();
                    let mi = mi.as_slice_mut();
                    let vi = vi.as_slice_mut();
                    for j in 0..p.len() {
                        mi[j] = ADAM_BETA1 * mi[j] + (1.0 - ADAM_BETA1) * g[j];
                        vi[j] = ADAM_BETA2 * vi[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        if !skip {
                            let m_hat = mi[j] / bc1;
                            let v_hat = vi[j] / bc2;
                            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One update step on a copy of the parameters. Adam here means a first Adam
/// step (fresh moments); training loops should hold an [`Optimizer`] instead.
pub fn apply_update(
    params: &ModelParams,
    grads: &Gradients,
    config: &TrainConfig,
) -> Result<ModelParams> {
    let mut out = params.clone();
    Optimizer::new(*config).step(&mut out, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentence, PAD_ID};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_hyper(vocab: usize) -> Hyperparams {
        Hyperparams {
            vocab_size: vocab,
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_positions: 41,
            tie_embeddings: false,
        }
    }

    fn sentence(ids: &[TokenId]) -> Sentence {
        Sentence {
            token_ids: ids.to_vec(),
            raw_text: String::new(),
            entity_spans: Vec::new(),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let h = tiny_hyper(12);
        let a = init_params(&h, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_params(&h, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn next_token_dist_sums_to_one() {
        let h = tiny_hyper(12);
        let params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dist = next_token_dist(&params, &[3, 4, 5]).unwrap();
        assert!((dist.sum() - 1.0).abs() <= 1e-12);
        assert!(dist.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn zeroed_head_gives_uniform() {
        let h = tiny_hyper(10);
        let mut params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params.u_out.as_mut().unwrap().fill(0.0);
        let dist = next_token_dist(&params, &[3]).unwrap();
        for &p in dist.iter() {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_logprob_and_perplexity() {
        let h = tiny_hyper(10);
        let mut params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params.u_out.as_mut().unwrap().fill(0.0);
        let tokens = [3, 4, 5];
        let lp = sentence_logprob(&params, &tokens).unwrap();
        assert!((lp - 3.0 * (0.1f64).ln()).abs() < 1e-10);
        assert!(lp <= 0.0);
        let ppl = perplexity(&params, &tokens).unwrap();
        assert!((ppl - 10.0).abs() < 1e-9);
    }

    #[test]
    fn logprob_matches_chained_next_token_dists() {
        let h = tiny_hyper(14);
        let params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tokens = [5, 9];
        let lp = sentence_logprob(&params, &tokens).unwrap();
        let p1 = next_token_dist_with_bos(&params, &[]).unwrap()[5].ln();
        let p2 = next_token_dist(&params, &[5]).unwrap()[9].ln();
        assert!((lp - (p1 + p2)).abs() < 1e-10);
    }

    #[test]
    fn grad_w_sparsity_untied() {
        let h = tiny_hyper(16);
        let params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let batch = Batch::from_sentences(vec![sentence(&[4, 7])]);
        let (_, grads) = loss_and_gradients(&params, &batch).unwrap();
        let nonzero: Vec<usize> = (0..h.vocab_size)
            .filter(|&v| grads.w_embed.row(v).iter().any(|&g| g != 0.0))
            .collect();
        assert_eq!(nonzero, vec![BOS_ID as usize, 4, 7]);
        // grad_P rows: exactly 0..len+1 (bos plus both tokens).
        let p_nonzero: Vec<usize> = (0..h.max_positions)
            .filter(|&i| grads.p_embed.row(i).iter().any(|&g| g != 0.0))
            .collect();
        assert_eq!(p_nonzero, vec![0, 1, 2]);
    }

    #[test]
    fn pads_do_not_change_loss_or_gradients() {
        let h = tiny_hyper(16);
        let params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = Batch::from_sentences(vec![sentence(&[4, 7, 9]), sentence(&[5])]);
        // Same members but manually extend padding.
        let mut b = a.clone();
        for row in &mut b.rows {
            row.resize(8, PAD_ID);
        }
        let (la, ga) = loss_and_gradients(&params, &a).unwrap();
        let (lb, gb) = loss_and_gradients(&params, &b).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn sgd_update_arithmetic_and_freeze() {
        let h = tiny_hyper(10);
        let params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut grads = Gradients::zeros_like(&params);

        // g = 0 leaves params unchanged.
        let cfg = TrainConfig {
            learning_rate: 0.1,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let updated = apply_update(&params, &grads, &cfg).unwrap();
        assert_eq!(updated, params);

        // theta = 1, g = 2, eta = 0.1 -> 0.8 on a single entry.
        let mut p2 = params.clone();
        p2.w_embed[[3, 0]] = 1.0;
        grads.w_embed[[3, 0]] = 2.0;
        let updated = apply_update(&p2, &grads, &cfg).unwrap();
        assert!((updated.w_embed[[3, 0]] - 0.8).abs() < 1e-15);

        // freeze_embeddings keeps W and P bit-identical, updates the rest.
        grads.ln_f.bias[0] = 1.0;
        let frozen_cfg = TrainConfig {
            freeze_embeddings: true,
            ..cfg
        };
        let updated = apply_update(&p2, &grads, &frozen_cfg).unwrap();
        assert_eq!(updated.w_embed, p2.w_embed);
        assert_eq!(updated.p_embed, p2.p_embed);
        assert!(updated.ln_f.bias[0] != p2.ln_f.bias[0]);
    }

    #[test]
    fn training_sanity_loss_decreases() {
        let h = Hyperparams {
            vocab_size: 12,
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_positions: 41,
            tie_embeddings: false,
        };
        let mut params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let batch = Batch::from_sentences(vec![
            sentence(&[3, 4, 5]),
            sentence(&[6, 7]),
            sentence(&[8, 9, 10]),
            sentence(&[11, 3]),
        ]);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let (initial, _) = loss_and_gradients(&params, &batch).unwrap();
        let mut opt = Optimizer::new(cfg);
        for _ in 0..200 {
            let (_, g) = loss_and_gradients(&params, &batch).unwrap();
            opt.step(&mut params, &g).unwrap();
        }
        let (final_loss, _) = loss_and_gradients(&params, &batch).unwrap();
        assert!(final_loss < initial, "{final_loss} !< {initial}");
    }

    /// Central finite differences over every parameter of a tiny model.
    #[test]
    fn finite_difference_gradient_check() {
        let h = tiny_hyper(10);
        let params = init_params(&h, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert!(params.param_count() <= 10_000);
        let batch = Batch::from_sentences(vec![sentence(&[3, 4, 5, 6]), sentence(&[7, 8])]);
        let (_, analytic) = loss_and_gradients(&params, &batch).unwrap();
        let step = 1e-5;
        let n = params.param_count();
        let mut max_rel = 0.0f64;
        for idx in 0..n {
            let mut plus = params.clone();
            plus.perturb_flat(idx, step);
            let (lp, _) = loss_and_gradients(&plus, &batch).unwrap();
            let mut minus = params.clone();
            minus.perturb_flat(idx, -step);
            let (lm, _) = loss_and_gradients(&minus, &batch).unwrap();
            let fd = (lp - lm) / (2.0 * step);
            let a = analytic.get_flat(idx);
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }
}
