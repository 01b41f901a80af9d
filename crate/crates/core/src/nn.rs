//! Pre-norm transformer blocks shared by the reconstructor and the gazer,
//! in two flavors: a tape (differentiable) forward over a whole sequence and
//! an incremental forward against per-layer KV caches. The two paths use the
//! same kernels and must agree within float noise; tests assert it.

use rand::rngs::StdRng;

use crate::scalar::{s, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{self, TensorData};

pub const RMS_EPS: f64 = 1e-6;

/// One pre-norm block: RMSNorm -> multi-head attention -> residual,
/// RMSNorm -> gated (SiLU) feed-forward -> residual.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub norm1: TensorData<S>,
    pub wq: TensorData<S>,
    pub wk: TensorData<S>,
    pub wv: TensorData<S>,
    pub wo: TensorData<S>,
    pub norm2: TensorData<S>,
    pub w_gate: TensorData<S>,
    pub w_up: TensorData<S>,
    pub w_down: TensorData<S>,
}

impl<S: Scalar> BlockParams<S> {
    pub fn init(dim: usize, hidden: usize, rng: &mut StdRng) -> Self {
        let std_in = 1.0 / (dim as f64).sqrt();
        let std_h = 1.0 / (hidden as f64).sqrt();
        Self {
            norm1: TensorData::full(vec![dim], S::one()),
            wq: TensorData::randn(vec![dim, dim], std_in, rng),
            wk: TensorData::randn(vec![dim, dim], std_in, rng),
            wv: TensorData::randn(vec![dim, dim], std_in, rng),
            wo: TensorData::randn(vec![dim, dim], std_in, rng),
            norm2: TensorData::full(vec![dim], S::one()),
            w_gate: TensorData::randn(vec![dim, hidden], std_in, rng),
            w_up: TensorData::randn(vec![dim, hidden], std_in, rng),
            w_down: TensorData::randn(vec![hidden, dim], std_h, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a TensorData<S>)) {
        f(format!("{prefix}.norm1"), &self.norm1);
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.norm2"), &self.norm2);
        f(format!("{prefix}.w_gate"), &self.w_gate);
        f(format!("{prefix}.w_up"), &self.w_up);
        f(format!("{prefix}.w_down"), &self.w_down);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut TensorData<S>)) {
        f(format!("{prefix}.norm1"), &mut self.norm1);
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.norm2"), &mut self.norm2);
        f(format!("{prefix}.w_gate"), &mut self.w_gate);
        f(format!("{prefix}.w_up"), &mut self.w_up);
        f(format!("{prefix}.w_down"), &mut self.w_down);
    }
}

/// Block parameters leafed onto a tape.
#[derive(Clone, Copy)]
pub struct BlockVars {
    pub norm1: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm2: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BlockVars {
    pub fn leaf<S: Scalar>(tape: &mut Tape<S>, p: &BlockParams<S>, trainable: bool) -> Self {
        Self {
            norm1: tape.leaf(p.norm1.clone(), trainable),
            wq: tape.leaf(p.wq.clone(), trainable),
            wk: tape.leaf(p.wk.clone(), trainable),
            wv: tape.leaf(p.wv.clone(), trainable),
            wo: tape.leaf(p.wo.clone(), trainable),
            norm2: tape.leaf(p.norm2.clone(), trainable),
            w_gate: tape.leaf(p.w_gate.clone(), trainable),
            w_up: tape.leaf(p.w_up.clone(), trainable),
            w_down: tape.leaf(p.w_down.clone(), trainable),
        }
    }

    pub fn vars(&self) -> [Var; 9] {
        [
            self.norm1,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.norm2,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Additive attention-mask matrix: 0 where allowed, -1e30 where blocked.
///
/// Strictly causal masks allow j <= i; block-causal masks allow attention
/// within the full frame of i and all earlier frames.
pub fn causal_mask<S: Scalar>(len: usize) -> TensorData<S> {
    let neg = s::<S>(-1e30);
    let mut m = TensorData::zeros(vec![len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data[i * len + j] = neg;
        }
    }
    m
}

pub fn block_causal_mask<S: Scalar>(frame_of: &[usize]) -> TensorData<S> {
    let len = frame_of.len();
    let neg = s::<S>(-1e30);
    let mut m = TensorData::zeros(vec![len, len]);
    for i in 0..len {
        for j in 0..len {
            if frame_of[j] > frame_of[i] {
                m.data[i * len + j] = neg;
            }
        }
    }
    m
}

/// Differentiable forward of one block over a [L, dim] sequence.
///
/// `rope_pos`, when given, applies rotary rotation to q and k at the stated
/// positions. The mask matrix is added to every head's scores.
pub fn block_forward_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &BlockVars,
    heads: usize,
    mask: &TensorData<S>,
    rope_pos: Option<&[usize]>,
) -> Var {
    let dim = tape.value(x).cols();
    let head_dim = dim / heads;
    let scale = s::<S>(1.0 / (head_dim as f64).sqrt());

    let xn = tape.rms_norm(x, p.norm1, s(RMS_EPS));
    let mut q = tape.matmul(xn, p.wq);
    let mut k = tape.matmul(xn, p.wk);
    let v = tape.matmul(xn, p.wv);
    if let Some(pos) = rope_pos {
        q = tape.rope(q, heads, pos);
        k = tape.rope(k, heads, pos);
    }
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let scores = tape.add_const(scores, mask.clone());
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&head_outs);
    let attn_out = tape.matmul(merged, p.wo);
    let x = tape.add(x, attn_out);

    let xn2 = tape.rms_norm(x, p.norm2, s(RMS_EPS));
    let gate = tape.matmul(xn2, p.w_gate);
    let gate = tape.silu(gate);
    let up = tape.matmul(xn2, p.w_up);
    let prod = tape.mul(gate, up);
    let mlp = tape.matmul(prod, p.w_down);
    tape.add(x, mlp)
}

// ---------------------------------------------------------------------------
// Incremental inference
// ---------------------------------------------------------------------------

/// Per-layer key/value rows accumulated across chunks.
#[derive(Debug, Clone)]
pub struct LayerCache<S> {
    pub k: Vec<S>,
    pub v: Vec<S>,
    pub len: usize,
    dim: usize,
}

impl<S: Scalar> LayerCache<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            len: 0,
            dim,
        }
    }

    pub fn append(&mut self, k: TensorData<S>, v: TensorData<S>) {
        debug_assert_eq!(k.shape, v.shape);
        self.len += k.shape[0];
        self.k.extend_from_slice(&k.data);
        self.v.extend_from_slice(&v.data);
    }
}

/// How chunk rows attend during an incremental extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkAttn {
    /// Row i of the chunk sees the cache plus chunk rows <= i.
    CausalWithinChunk,
    /// Every chunk row sees the cache plus the whole chunk (frame block).
    FullChunk,
}

/// Run one block over a new chunk of rows against the cache, without
/// mutating it. Returns the chunk outputs plus the chunk's k/v rows so the
/// caller can decide whether to append them.
pub fn block_attend<S: Scalar>(
    p: &BlockParams<S>,
    cache: &LayerCache<S>,
    x: &TensorData<S>,
    heads: usize,
    rope_pos: Option<&[usize]>,
    attn: ChunkAttn,
) -> (TensorData<S>, TensorData<S>, TensorData<S>) {
    let dim = cache.dim;
    let n = x.shape[0];
    let head_dim = dim / heads;
    let scale = s::<S>(1.0 / (head_dim as f64).sqrt());

    let xn = tensor::rms_norm_rows(x, &p.norm1.data, s(RMS_EPS));
    let mut q = tensor::matmul(&xn, &p.wq);
    let mut k = tensor::matmul(&xn, &p.wk);
    let v = tensor::matmul(&xn, &p.wv);
    if let Some(pos) = rope_pos {
        tensor::rope_inplace(&mut q.data, dim, heads, pos, false);
        tensor::rope_inplace(&mut k.data, dim, heads, pos, false);
    }
    let base = cache.len;

    let key_row = |j: usize, h: usize| -> &[S] {
        if j < base {
            &cache.k[j * dim + h * head_dim..j * dim + (h + 1) * head_dim]
        } else {
            let i = j - base;
            &k.data[i * dim + h * head_dim..i * dim + (h + 1) * head_dim]
        }
    };
    let val_row = |j: usize, h: usize| -> &[S] {
        if j < base {
            &cache.v[j * dim + h * head_dim..j * dim + (h + 1) * head_dim]
        } else {
            let i = j - base;
            &v.data[i * dim + h * head_dim..i * dim + (h + 1) * head_dim]
        }
    };

    let mut attn_out = TensorData::zeros(vec![n, dim]);
    let mut scores: Vec<S> = Vec::new();
    for i in 0..n {
        let visible = match attn {
            ChunkAttn::CausalWithinChunk => base + i + 1,
            ChunkAttn::FullChunk => base + n,
        };
        for h in 0..heads {
            let qrow = &q.data[i * dim + h * head_dim..i * dim + (h + 1) * head_dim];
            scores.clear();
            scores.reserve(visible);
            for j in 0..visible {
                let krow = key_row(j, h);
                let mut acc = S::zero();
                for d in 0..head_dim {
                    acc = acc + qrow[d] * krow[d];
                }
                scores.push(acc * scale);
            }
            tensor::softmax_rows_inplace(&mut scores, visible);
            let orow = &mut attn_out.data[i * dim + h * head_dim..i * dim + (h + 1) * head_dim];
            for (j, &w) in scores.iter().enumerate() {
                if w == S::zero() {
                    continue;
                }
                let vrow = val_row(j, h);
                for d in 0..head_dim {
                    orow[d] = orow[d] + w * vrow[d];
                }
            }
        }
    }
    let attn_proj = tensor::matmul(&attn_out, &p.wo);
    let mut x1 = x.clone();
    for (a, &b) in x1.data.iter_mut().zip(attn_proj.data.iter()) {
        *a = *a + b;
    }

    let xn2 = tensor::rms_norm_rows(&x1, &p.norm2.data, s(RMS_EPS));
    let mut gate = tensor::matmul(&xn2, &p.w_gate);
    for g in gate.data.iter_mut() {
        *g = tensor::silu(*g);
    }
    let up = tensor::matmul(&xn2, &p.w_up);
    for (g, &u) in gate.data.iter_mut().zip(up.data.iter()) {
        *g = *g * u;
    }
    let mlp = tensor::matmul(&gate, &p.w_down);
    for (a, &b) in x1.data.iter_mut().zip(mlp.data.iter()) {
        *a = *a + b;
    }
    (x1, k, v)
}

/// `block_attend` plus cache append.
pub fn block_extend<S: Scalar>(
    p: &BlockParams<S>,
    cache: &mut LayerCache<S>,
    x: &TensorData<S>,
    heads: usize,
    rope_pos: Option<&[usize]>,
    attn: ChunkAttn,
) -> TensorData<S> {
    let (out, k, v) = block_attend(p, cache, x, heads, rope_pos, attn);
    cache.append(k, v);
    out
}

/// Final-layer block extension when only the last chunk row's output will
/// ever be read (block decoding): k/v are produced for every row so the
/// cache stays complete, but queries, attention, and the feed-forward run
/// for the last row alone. Returns the [1, dim] last-row output.
pub fn block_attend_tail<S: Scalar>(
    p: &BlockParams<S>,
    cache: &LayerCache<S>,
    x: &TensorData<S>,
    heads: usize,
    rope_pos: Option<&[usize]>,
) -> (TensorData<S>, TensorData<S>, TensorData<S>) {
    let dim = cache.dim;
    let n = x.shape[0];
    let head_dim = dim / heads;
    let scale = s::<S>(1.0 / (head_dim as f64).sqrt());

    let xn = tensor::rms_norm_rows(x, &p.norm1.data, s(RMS_EPS));
    let mut k = tensor::matmul(&xn, &p.wk);
    let v = tensor::matmul(&xn, &p.wv);
    let last_xn = TensorData::new(vec![1, dim], xn.data[(n - 1) * dim..n * dim].to_vec());
    let mut q = tensor::matmul(&last_xn, &p.wq);
    if let Some(pos) = rope_pos {
        tensor::rope_inplace(&mut k.data, dim, heads, pos, false);
        tensor::rope_inplace(&mut q.data, dim, heads, &pos[n - 1..], false);
    }
    let base = cache.len;
    let visible = base + n;

    let mut attn_out = TensorData::zeros(vec![1, dim]);
    let mut scores: Vec<S> = Vec::with_capacity(visible);
    for h in 0..heads {
        let qrow = &q.data[h * head_dim..(h + 1) * head_dim];
        scores.clear();
        for j in 0..visible {
            let krow = if j < base {
                &cache.k[j * dim + h * head_dim..j * dim + (h + 1) * head_dim]
            } else {
                let i = j - base;
                &k.data[i * dim + h * head_dim..i * dim + (h + 1) * head_dim]
            };
            let mut acc = S::zero();
            for d in 0..head_dim {
                acc = acc + qrow[d] * krow[d];
            }
            scores.push(acc * scale);
        }
        tensor::softmax_rows_inplace(&mut scores, visible);
        let orow = &mut attn_out.data[h * head_dim..(h + 1) * head_dim];
        for (j, &w) in scores.iter().enumerate() {
            if w == S::zero() {
                continue;
            }
            let vrow = if j < base {
                &cache.v[j * dim + h * head_dim..j * dim + (h + 1) * head_dim]
            } else {
                let i = j - base;
                &v.data[i * dim + h * head_dim..i * dim + (h + 1) * head_dim]
            };
            for d in 0..head_dim {
                orow[d] = orow[d] + w * vrow[d];
            }
        }
    }
    let attn_proj = tensor::matmul(&attn_out, &p.wo);
    let mut x1 = TensorData::new(vec![1, dim], x.data[(n - 1) * dim..n * dim].to_vec());
    for (a, &b) in x1.data.iter_mut().zip(attn_proj.data.iter()) {
        *a = *a + b;
    }
    let xn2 = tensor::rms_norm_rows(&x1, &p.norm2.data, s(RMS_EPS));
    let mut gate = tensor::matmul(&xn2, &p.w_gate);
    for g in gate.data.iter_mut() {
        *g = tensor::silu(*g);
    }
    let up = tensor::matmul(&xn2, &p.w_up);
    for (g, &u) in gate.data.iter_mut().zip(up.data.iter()) {
        *g = *g * u;
    }
    let mlp = tensor::matmul(&gate, &p.w_down);
    for (a, &b) in x1.data.iter_mut().zip(mlp.data.iter()) {
        *a = *a + b;
    }
    (x1, k, v)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Learning rate is passed per step so the
/// caller owns the schedule.
pub struct AdamW<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Advance the shared step counter; call once per optimizer step before
    /// the per-parameter `update` calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter tensor (index aligned with construction order).
    pub fn update(&mut self, idx: usize, p: &mut TensorData<S>, g: &[S], lr: f64) {
        debug_assert_eq!(p.len(), g.len());
        let b1 = s::<S>(self.beta1);
        let b2 = s::<S>(self.beta2);
        let bc1 = s::<S>(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = s::<S>(1.0 - self.beta2.powi(self.step as i32));
        let lr_s = s::<S>(lr);
        let wd = s::<S>(self.weight_decay * lr);
        let eps = s::<S>(self.eps);
        let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * g[i];
            v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let x = p.data[i];
            p.data[i] = x - lr_s * mhat / (vhat.sqrt() + eps) - wd * x;
        }
    }

    pub fn step(&mut self, params: &mut [&mut TensorData<S>], grads: &[Vec<S>], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.begin_step();
        for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            self.update(idx, p, g, lr);
        }
    }
}

/// Cosine decay from `lr` to `lr * floor_frac` over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize, floor_frac: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    let lo = lr * floor_frac;
    lo + 0.5 * (lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}
