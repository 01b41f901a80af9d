//! Dense row-major tensors and the plain numeric kernels shared by the
//! autodiff tape and the inference paths.

use rand::rngs::StdRng;
use rand::Rng;

use crate::scalar::{s, Scalar};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> TensorData<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Gaussian init with the given std. Draws in f64 so f32/f64 models built
    /// from the same seed hold the same values.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut StdRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| s::<S>(crate::tensor::normal_f64(rng) * std))
            .collect();
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Box-Muller standard normal, consuming two uniform draws.
pub fn normal_f64(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Kernels. All loops are deterministic; no parallelism inside a kernel.
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<S: Scalar>(a: &TensorData<S>, b: &TensorData<S>) -> TensorData<S> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    debug_assert_eq!(k, k2, "matmul inner dims");
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    TensorData::new(vec![m, n], out)
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt<S: Scalar>(a: &TensorData<S>, b: &TensorData<S>) -> TensorData<S> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    debug_assert_eq!(k, k2, "matmul_nt inner dims");
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    TensorData::new(vec![m, n], out)
}

/// C[k,n] += A[m,k]^T * B[m,n], used by matmul backward.
pub fn matmul_tn_acc<S: Scalar>(a: &TensorData<S>, b: &TensorData<S>, out: &mut [S], n: usize) {
    let (m, k) = (a.shape[0], a.shape[1]);
    debug_assert_eq!(b.shape[0], m);
    debug_assert_eq!(b.shape[1], n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Numerically stable in-place softmax over the last `cols` elements of each row.
pub fn softmax_rows_inplace<S: Scalar>(data: &mut [S], cols: usize) {
    for row in data.chunks_mut(cols) {
        let mut max = S::neg_infinity();
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut sum = S::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// Stable log-softmax of a single row.
pub fn log_softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let mut max = S::neg_infinity();
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for &x in row {
        sum = sum + (x - max).exp();
    }
    let lse = max + sum.ln();
    row.iter().map(|&x| x - lse).collect()
}

pub fn softplus<S: Scalar>(x: S) -> S {
    // ln(1+e^x) with the large-x branch to avoid overflow
    if x > s(30.0) {
        x
    } else {
        (S::one() + x.exp()).ln()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// RMS normalization of each row, scaled by `weight`.
pub fn rms_norm_rows<S: Scalar>(x: &TensorData<S>, weight: &[S], eps: S) -> TensorData<S> {
    let cols = *x.shape.last().unwrap();
    let mut out = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(cols) {
        let mut ss = S::zero();
        for &v in row {
            ss = ss + v * v;
        }
        let inv = (ss / s::<S>(cols as f64) + eps).sqrt().recip();
        for (i, &v) in row.iter().enumerate() {
            out.push(v * inv * weight[i]);
        }
    }
    TensorData::new(x.shape.clone(), out)
}

/// 2D convolution on CHW input, OIHW weight, with stride and zero padding.
pub fn conv2d<S: Scalar>(
    input: &TensorData<S>,
    weight: &TensorData<S>,
    bias: &[S],
    stride: usize,
    pad: usize,
) -> TensorData<S> {
    let (ic, ih, iw) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oc, wc, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    debug_assert_eq!(ic, wc);
    let oh = (ih + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let mut out = vec![S::zero(); oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for c in 0..ic {
                    for ky in 0..kh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= iw as isize {
                                continue;
                            }
                            acc = acc
                                + input.data[(c * ih + y as usize) * iw + x as usize]
                                    * weight.data[((o * ic + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    TensorData::new(vec![oc, oh, ow], out)
}

/// Rotary rotation applied in place to each head's even/odd channel pairs.
///
/// `x` is [L, dim]; position `positions[i]` drives row i. Inverse rotation
/// (for the backward pass) is the same with negated angles.
pub fn rope_inplace<S: Scalar>(
    x: &mut [S],
    dim: usize,
    n_heads: usize,
    positions: &[usize],
    invert: bool,
) {
    let head_dim = dim / n_heads;
    let half = head_dim / 2;
    for (i, &pos) in positions.iter().enumerate() {
        let row = &mut x[i * dim..(i + 1) * dim];
        for h in 0..n_heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for p in 0..half {
                let theta = pos as f64
                    * (10_000f64).powf(-2.0 * p as f64 / head_dim as f64);
                let (sin, cos) = theta.sin_cos();
                let (sin, cos) = (s::<S>(if invert { -sin } else { sin }), s::<S>(cos));
                let a = head[2 * p];
                let b = head[2 * p + 1];
                head[2 * p] = a * cos - b * sin;
                head[2 * p + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Area-average resample of an HxWx3 float frame to side x side.
///
/// Exact when the source side is a multiple of the target side (the only case
/// the multi-scale pyramid uses); falls back to fractional-overlap weights
/// otherwise.
pub fn area_resample<S: Scalar>(frame: &TensorData<S>, side: usize) -> TensorData<S> {
    let (h, w) = (frame.shape[0], frame.shape[1]);
    debug_assert_eq!(frame.shape[2], 3);
    if h == side && w == side {
        return frame.clone();
    }
    let mut out = vec![S::zero(); side * side * 3];
    if h % side == 0 && w % side == 0 {
        let (by, bx) = (h / side, w / side);
        let inv = s::<S>(1.0 / (by * bx) as f64);
        for oy in 0..side {
            for ox in 0..side {
                for c in 0..3 {
                    let mut acc = S::zero();
                    for dy in 0..by {
                        for dx in 0..bx {
                            acc = acc + frame.data[((oy * by + dy) * w + ox * bx + dx) * 3 + c];
                        }
                    }
                    out[(oy * side + ox) * 3 + c] = acc * inv;
                }
            }
        }
    } else {
        let sy = h as f64 / side as f64;
        let sx = w as f64 / side as f64;
        for oy in 0..side {
            let y0 = oy as f64 * sy;
            let y1 = y0 + sy;
            for ox in 0..side {
                let x0 = ox as f64 * sx;
                let x1 = x0 + sx;
                for c in 0..3 {
                    let mut acc = 0f64;
                    let mut area = 0f64;
                    let mut y = y0.floor() as usize;
                    while (y as f64) < y1 && y < h {
                        let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                        let mut x = x0.floor() as usize;
                        while (x as f64) < x1 && x < w {
                            let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                            acc += frame.data[(y * w + x) * 3 + c].to_f64() * wy * wx;
                            area += wy * wx;
                            x += 1;
                        }
                        y += 1;
                    }
                    out[(oy * side + ox) * 3 + c] = s(acc / area);
                }
            }
        }
    }
    TensorData::new(vec![side, side, 3], out)
}
