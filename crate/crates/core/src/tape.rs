//! Reverse-mode autodiff over [`TensorData`].
//!
//! A [`Tape`] is rebuilt for every training step: leaves are parameter or
//! input tensors, interior nodes record the op and its operands, and
//! [`Tape::backward`] walks the nodes in reverse accumulating gradients.
//! Forward values are computed eagerly at insertion with the same kernels
//! the inference paths use.

use crate::scalar::{s, Scalar};
use crate::tensor::{self, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddRowBroadcast(Var, Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RmsNorm { x: Var, weight: Var, eps: S },
    Silu(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    Permute { x: Var, perm: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    AddConst(Var),
    MulConst(Var, TensorData<S>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    CausalConv3d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Rope {
        x: Var,
        n_heads: usize,
        positions: Vec<usize>,
    },
    Clamp01(Var),
    UnitNormalize(Var),
    MaskSelect { x: Var, mask: Vec<bool> },
}

struct Node<S: Scalar> {
    value: TensorData<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &TensorData<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: TensorData<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: TensorData<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: TensorData<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape, self.value(b).shape);
        let v = TensorData::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape, self.value(b).shape);
        let v = TensorData::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(&x, &y)| x - y)
                .collect(),
        );
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape, self.value(b).shape);
        let v = TensorData::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        let g = self.ng(a);
        self.push(v, Op::Neg(a), g)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    /// `[R,C] + [C]` bias add.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let cols = *self.value(a).shape.last().unwrap();
        debug_assert_eq!(self.value(bias).len(), cols);
        let bdat = self.value(bias).data.clone();
        let v = TensorData::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bdat[i % cols])
                .collect(),
        );
        let g = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddRowBroadcast(a, bias), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_nt(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatmulNT(a, b), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let cols = *self.value(a).shape.last().unwrap();
        let mut d = self.value(a).data.clone();
        tensor::softmax_rows_inplace(&mut d, cols);
        let v = TensorData::new(self.value(a).shape.clone(), d);
        let g = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let cols = *self.value(a).shape.last().unwrap();
        let mut d = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).data.chunks(cols) {
            d.extend(tensor::log_softmax_row(row));
        }
        let v = TensorData::new(self.value(a).shape.clone(), d);
        let g = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), g)
    }

    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: S) -> Var {
        let v = tensor::rms_norm_rows(self.value(x), &self.value(weight).data, eps);
        let g = self.ng(x) || self.ng(weight);
        self.push(v, Op::RmsNorm { x, weight, eps }, g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::silu);
        let g = self.ng(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn tanh_act(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let g = self.ng(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::softplus);
        let g = self.ng(a);
        self.push(v, Op::Softplus(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let g = self.ng(a);
        self.push(v, Op::Abs(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.ng(a);
        self.push(v, Op::Square(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let g = self.ng(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = S::zero();
        for &x in &self.value(a).data {
            acc = acc + x;
        }
        let g = self.ng(a);
        self.push(TensorData::scalar(acc), Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let mut acc = S::zero();
        for &x in &self.value(a).data {
            acc = acc + x;
        }
        let g = self.ng(a);
        self.push(
            TensorData::scalar(acc / s::<S>(n as f64)),
            Op::MeanAll(a),
            g,
        )
    }

    /// Row lookup: out[i] = table[idx[i]]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let cols = *self.value(table).shape.last().unwrap();
        let mut d = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            d.extend_from_slice(&self.value(table).data[i * cols..(i + 1) * cols]);
        }
        let g = self.ng(table);
        self.push(
            TensorData::new(vec![idx.len(), cols], d),
            Op::GatherRows(table, idx.to_vec()),
            g,
        )
    }

    /// Per-row column pick: out[r] = x[r, cols[r]].
    pub fn gather_cols(&mut self, x: Var, cols_idx: &[usize]) -> Var {
        let cols = *self.value(x).shape.last().unwrap();
        debug_assert_eq!(self.value(x).rows(), cols_idx.len());
        let d: Vec<S> = cols_idx
            .iter()
            .enumerate()
            .map(|(r, &c)| self.value(x).data[r * cols + c])
            .collect();
        let g = self.ng(x);
        self.push(
            TensorData::new(vec![cols_idx.len()], d),
            Op::GatherCols(x, cols_idx.to_vec()),
            g,
        )
    }

    /// Concatenate along the first axis; trailing dims must match.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tail = self.value(parts[0]).shape[1..].to_vec();
        let mut rows = 0;
        let mut d = Vec::new();
        for &p in parts {
            debug_assert_eq!(self.value(p).shape[1..], tail[..]);
            rows += self.value(p).shape[0];
            d.extend_from_slice(&self.value(p).data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(TensorData::new(shape, d), Op::ConcatRows(parts.to_vec()), g)
    }

    /// Contiguous first-axis slice.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let row_size: usize = self.value(x).shape[1..].iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(&self.value(x).shape[1..]);
        let d = self.value(x).data[start * row_size..(start + len) * row_size].to_vec();
        let g = self.ng(x);
        self.push(TensorData::new(shape, d), Op::SliceRows { x, start, len }, g)
    }

    /// out[i] = x[perm[i]] with the given output shape; backward scatters.
    pub fn permute(&mut self, x: Var, perm: &[usize], shape: Vec<usize>) -> Var {
        debug_assert_eq!(perm.len(), shape.iter().product::<usize>());
        let d: Vec<S> = perm.iter().map(|&i| self.value(x).data[i]).collect();
        let g = self.ng(x);
        self.push(
            TensorData::new(shape, d),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            g,
        )
    }

    /// Pure metadata reshape (same data order).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape size mismatch"
        );
        let d = self.value(x).data.clone();
        let g = self.ng(x);
        let len = self.value(x).shape.first().copied().unwrap_or(1);
        // identity permute semantics without building the index table
        self.push(TensorData::new(shape, d), Op::SliceRows { x, start: 0, len }, g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let mut d = Vec::with_capacity(r * len);
        for i in 0..r {
            d.extend_from_slice(&self.value(x).data[i * c + start..i * c + start + len]);
        }
        let g = self.ng(x);
        self.push(
            TensorData::new(vec![r, len], d),
            Op::SliceCols { x, start, len },
            g,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut d = vec![S::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let c = self.value(p).cols();
            debug_assert_eq!(self.value(p).rows(), rows);
            for i in 0..rows {
                d[i * total + off..i * total + off + c]
                    .copy_from_slice(&self.value(p).data[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(
            TensorData::new(vec![rows, total], d),
            Op::ConcatCols(parts.to_vec()),
            g,
        )
    }

    pub fn add_const(&mut self, a: Var, c: TensorData<S>) -> Var {
        debug_assert_eq!(self.value(a).shape, c.shape);
        let v = TensorData::new(
            c.shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(c.data.iter())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        let g = self.ng(a);
        self.push(v, Op::AddConst(a), g)
    }

    pub fn mul_const(&mut self, a: Var, c: TensorData<S>) -> Var {
        debug_assert_eq!(self.value(a).shape, c.shape);
        let v = TensorData::new(
            c.shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(c.data.iter())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        let g = self.ng(a);
        self.push(v, Op::MulConst(a, c), g)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let v = tensor::conv2d(
            self.value(input),
            self.value(weight),
            &self.value(bias).data,
            stride,
            pad,
        );
        let g = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            g,
        )
    }

    /// 3D conv over a [T,C,H,W] feature stack: temporal taps reach the current
    /// and the two previous frames only, spatial 3x3 with zero pad 1.
    /// Weight layout [O,C,3,3,3] indexed (o, c, dt, ky, kx) where dt is the
    /// number of frames back.
    pub fn causal_conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let v = causal_conv3d_forward(
            self.value(input),
            self.value(weight),
            &self.value(bias).data,
        );
        let g = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(v, Op::CausalConv3d { input, weight, bias }, g)
    }

    pub fn rope(&mut self, x: Var, n_heads: usize, positions: &[usize]) -> Var {
        let dim = self.value(x).cols();
        let mut d = self.value(x).data.clone();
        tensor::rope_inplace(&mut d, dim, n_heads, positions, false);
        let g = self.ng(x);
        self.push(
            TensorData::new(self.value(x).shape.clone(), d),
            Op::Rope {
                x,
                n_heads,
                positions: positions.to_vec(),
            },
            g,
        )
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| x.max(S::zero()).min(S::one()));
        let g = self.ng(a);
        self.push(v, Op::Clamp01(a), g)
    }

    /// v / max(||v||, eps) over the whole (flat) tensor.
    pub fn unit_normalize(&mut self, a: Var) -> Var {
        let mut ss = S::zero();
        for &x in &self.value(a).data {
            ss = ss + x * x;
        }
        let norm = ss.sqrt().max(s(1e-12));
        let v = self.value(a).map(|x| x / norm);
        let g = self.ng(a);
        self.push(v, Op::UnitNormalize(a), g)
    }

    /// out[i] = if mask[i] { x[i] } else { base[i] }; grads flow only through
    /// the masked-in entries.
    pub fn mask_select(&mut self, x: Var, base: TensorData<S>, mask: &[bool]) -> Var {
        debug_assert_eq!(self.value(x).len(), base.len());
        debug_assert_eq!(base.len(), mask.len());
        let v = TensorData::new(
            base.shape.clone(),
            self.value(x)
                .data
                .iter()
                .zip(base.data.iter())
                .zip(mask.iter())
                .map(|((&x, &b), &m)| if m { x } else { b })
                .collect(),
        );
        let g = self.ng(x);
        self.push(
            v,
            Op::MaskSelect {
                x,
                mask: mask.to_vec(),
            },
            g,
        )
    }

    /// Reverse pass from a scalar loss node; callable repeatedly for
    /// different roots on the same tape.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        debug_assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, delta: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(delta.iter()) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d: Vec<S> = g
                        .iter()
                        .zip(self.value(*b).data.iter())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(grads, *a, &d);
                }
                if self.ng(*b) {
                    let d: Vec<S> = g
                        .iter()
                        .zip(self.value(*a).data.iter())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::Neg(a) => {
                let d: Vec<S> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Scale(a, c) => {
                let d: Vec<S> = g.iter().map(|&x| x * *c).collect();
                self.accumulate(grads, *a, &d);
            }
            Op::AddRowBroadcast(a, bias) => {
                self.accumulate(grads, *a, g);
                if self.ng(*bias) {
                    let cols = self.value(*bias).len();
                    let mut d = vec![S::zero(); cols];
                    for (i, &x) in g.iter().enumerate() {
                        d[i % cols] = d[i % cols] + x;
                    }
                    self.accumulate(grads, *bias, &d);
                }
            }
            Op::Matmul(a, b) => {
                let (m, n) = (self.value(*a).rows(), self.value(*b).cols());
                let gt = TensorData::new(vec![m, n], g.to_vec());
                if self.ng(*a) {
                    let da = tensor::matmul_nt(&gt, self.value(*b));
                    self.accumulate(grads, *a, &da.data);
                }
                if self.ng(*b) {
                    let k = self.value(*a).cols();
                    let mut db = vec![S::zero(); k * n];
                    tensor::matmul_tn_acc(self.value(*a), &gt, &mut db, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MatmulNT(a, b) => {
                // out = a (m,k) * b^T (n,k) -> (m,n)
                let (m, n) = (self.value(*a).rows(), self.value(*b).rows());
                let gt = TensorData::new(vec![m, n], g.to_vec());
                if self.ng(*a) {
                    let da = tensor::matmul(&gt, self.value(*b));
                    self.accumulate(grads, *a, &da.data);
                }
                if self.ng(*b) {
                    let k = self.value(*b).cols();
                    let mut db = vec![S::zero(); n * k];
                    tensor::matmul_tn_acc(&gt, self.value(*a), &mut db, k);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.value(Var(i)).data;
                let cols = *self.value(Var(i)).shape.last().unwrap();
                let mut d = vec![S::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = S::zero();
                    for p in 0..cols {
                        dot = dot + yr[p] * gr[p];
                    }
                    for p in 0..cols {
                        d[r * cols + p] = yr[p] * (gr[p] - dot);
                    }
                }
                self.accumulate(grads, *a, &d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.value(Var(i)).data; // log-probs
                let cols = *self.value(Var(i)).shape.last().unwrap();
                let mut d = vec![S::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut gsum = S::zero();
                    for p in 0..cols {
                        gsum = gsum + gr[p];
                    }
                    for p in 0..cols {
                        d[r * cols + p] = gr[p] - yr[p].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, &d);
            }
            Op::RmsNorm { x, weight, eps } => {
                let xv = self.value(*x);
                let wv = &self.value(*weight).data;
                let cols = *xv.shape.last().unwrap();
                let cn = s::<S>(cols as f64);
                let mut dx = vec![S::zero(); xv.len()];
                let mut dw = vec![S::zero(); cols];
                for r in 0..xv.len() / cols {
                    let xr = &xv.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut ss = S::zero();
                    for &v in xr {
                        ss = ss + v * v;
                    }
                    let inv = (ss / cn + *eps).sqrt().recip();
                    let mut gwx = S::zero();
                    for p in 0..cols {
                        gwx = gwx + gr[p] * wv[p] * xr[p];
                        dw[p] = dw[p] + gr[p] * xr[p] * inv;
                    }
                    let coef = inv * inv * inv / cn * gwx;
                    for p in 0..cols {
                        dx[r * cols + p] = gr[p] * wv[p] * inv - xr[p] * coef;
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *weight, &dw);
            }
            Op::Silu(a) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(self.value(*a).data.iter())
                    .map(|(&gv, &x)| {
                        let sg = tensor::sigmoid(x);
                        gv * sg * (S::one() + x * (S::one() - sg))
                    })
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(self.value(Var(i)).data.iter())
                    .map(|(&gv, &y)| gv * (S::one() - y * y))
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Softplus(a) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(self.value(*a).data.iter())
                    .map(|(&gv, &x)| gv * tensor::sigmoid(x))
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Abs(a) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(self.value(*a).data.iter())
                    .map(|(&gv, &x)| {
                        if x > S::zero() {
                            gv
                        } else if x < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Square(a) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(self.value(*a).data.iter())
                    .map(|(&gv, &x)| gv * x * s::<S>(2.0))
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Exp(a) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(self.value(Var(i)).data.iter())
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::SumAll(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                self.accumulate(grads, *a, &d);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let d = vec![g[0] / s::<S>(n as f64); n];
                self.accumulate(grads, *a, &d);
            }
            Op::GatherRows(table, idx) => {
                if self.ng(*table) {
                    let cols = *self.value(*table).shape.last().unwrap();
                    let mut d = vec![S::zero(); self.value(*table).len()];
                    for (r, &row) in idx.iter().enumerate() {
                        for p in 0..cols {
                            d[row * cols + p] = d[row * cols + p] + g[r * cols + p];
                        }
                    }
                    self.accumulate(grads, *table, &d);
                }
            }
            Op::GatherCols(x, cols_idx) => {
                let cols = *self.value(*x).shape.last().unwrap();
                let mut d = vec![S::zero(); self.value(*x).len()];
                for (r, &c) in cols_idx.iter().enumerate() {
                    d[r * cols + c] = g[r];
                }
                self.accumulate(grads, *x, &d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows { x, start, len } => {
                let row_size: usize = self.value(*x).shape.iter().skip(1).product();
                let mut d = vec![S::zero(); self.value(*x).len()];
                d[start * row_size..(start + len) * row_size].copy_from_slice(g);
                self.accumulate(grads, *x, &d);
            }
            Op::Permute { x, perm } => {
                let mut d = vec![S::zero(); self.value(*x).len()];
                for (i, &src) in perm.iter().enumerate() {
                    d[src] = d[src] + g[i];
                }
                self.accumulate(grads, *x, &d);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let mut d = vec![S::zero(); r * c];
                for row in 0..r {
                    d[row * c + start..row * c + start + len]
                        .copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                self.accumulate(grads, *x, &d);
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = vec![S::zero(); rows * c];
                        for row in 0..rows {
                            d[row * c..(row + 1) * c]
                                .copy_from_slice(&g[row * total + off..row * total + off + c]);
                        }
                        self.accumulate(grads, p, &d);
                    }
                    off += c;
                }
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g),
            Op::MulConst(a, c) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(c.data.iter())
                    .map(|(&gv, &cv)| gv * cv)
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let inp = self.value(*input);
                let w = self.value(*weight);
                let (ic, ih, iw) = (inp.shape[0], inp.shape[1], inp.shape[2]);
                let (oc, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
                let oh = (ih + 2 * pad - kh) / stride + 1;
                let ow = (iw + 2 * pad - kw) / stride + 1;
                let mut din = vec![S::zero(); inp.len()];
                let mut dw = vec![S::zero(); w.len()];
                let mut db = vec![S::zero(); oc];
                let want_in = self.ng(*input);
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(o * oh + oy) * ow + ox];
                            if go == S::zero() {
                                continue;
                            }
                            db[o] = db[o] + go;
                            for c in 0..ic {
                                for ky in 0..kh {
                                    let y = (oy * stride + ky) as isize - *pad as isize;
                                    if y < 0 || y >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let x = (ox * stride + kx) as isize - *pad as isize;
                                        if x < 0 || x >= iw as isize {
                                            continue;
                                        }
                                        let ii = (c * ih + y as usize) * iw + x as usize;
                                        let wi = ((o * ic + c) * kh + ky) * kw + kx;
                                        dw[wi] = dw[wi] + inp.data[ii] * go;
                                        if want_in {
                                            din[ii] = din[ii] + w.data[wi] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, &din);
                self.accumulate(grads, *weight, &dw);
                self.accumulate(grads, *bias, &db);
            }
            Op::CausalConv3d { input, weight, bias } => {
                let inp = self.value(*input);
                let w = self.value(*weight);
                let (t_len, ic, ih, iw) =
                    (inp.shape[0], inp.shape[1], inp.shape[2], inp.shape[3]);
                let oc = w.shape[0];
                let mut din = vec![S::zero(); inp.len()];
                let mut dw = vec![S::zero(); w.len()];
                let mut db = vec![S::zero(); oc];
                let want_in = self.ng(*input);
                for t in 0..t_len {
                    for o in 0..oc {
                        for y in 0..ih {
                            for x in 0..iw {
                                let go = g[((t * oc + o) * ih + y) * iw + x];
                                if go == S::zero() {
                                    continue;
                                }
                                db[o] = db[o] + go;
                                for dt in 0..3usize {
                                    if t < dt {
                                        continue;
                                    }
                                    let ts = t - dt;
                                    for c in 0..ic {
                                        for ky in 0..3usize {
                                            let sy = y as isize + ky as isize - 1;
                                            if sy < 0 || sy >= ih as isize {
                                                continue;
                                            }
                                            for kx in 0..3usize {
                                                let sx = x as isize + kx as isize - 1;
                                                if sx < 0 || sx >= iw as isize {
                                                    continue;
                                                }
                                                let ii = ((ts * ic + c) * ih + sy as usize) * iw
                                                    + sx as usize;
                                                let wi =
                                                    (((o * ic + c) * 3 + dt) * 3 + ky) * 3 + kx;
                                                dw[wi] = dw[wi] + inp.data[ii] * go;
                                                if want_in {
                                                    din[ii] = din[ii] + w.data[wi] * go;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, &din);
                self.accumulate(grads, *weight, &dw);
                self.accumulate(grads, *bias, &db);
            }
            Op::Rope {
                x,
                n_heads,
                positions,
            } => {
                let dim = self.value(*x).cols();
                let mut d = g.to_vec();
                tensor::rope_inplace(&mut d, dim, *n_heads, positions, true);
                self.accumulate(grads, *x, &d);
            }
            Op::Clamp01(a) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(self.value(*a).data.iter())
                    .map(|(&gv, &x)| {
                        if x > S::zero() && x < S::one() {
                            gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::UnitNormalize(a) => {
                let xv = &self.value(*a).data;
                let mut ss = S::zero();
                for &x in xv.iter() {
                    ss = ss + x * x;
                }
                let norm = ss.sqrt().max(s(1e-12));
                let mut dot = S::zero();
                for (&gv, &x) in g.iter().zip(xv.iter()) {
                    dot = dot + gv * x;
                }
                let n3 = norm * norm * norm;
                let d: Vec<S> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gv, &x)| gv / norm - x * dot / n3)
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::MaskSelect { x, mask } => {
                let d: Vec<S> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &m)| if m { gv } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, &d);
            }
        }
    }
}

/// Forward kernel for the causal 3D conv, shared with the tape op.
pub fn causal_conv3d_forward<S: Scalar>(
    input: &TensorData<S>,
    weight: &TensorData<S>,
    bias: &[S],
) -> TensorData<S> {
    let (t_len, ic, ih, iw) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (oc, wc) = (weight.shape[0], weight.shape[1]);
    debug_assert_eq!(ic, wc);
    debug_assert_eq!(&weight.shape[2..], &[3, 3, 3]);
    let mut out = vec![S::zero(); t_len * oc * ih * iw];
    for t in 0..t_len {
        for o in 0..oc {
            for y in 0..ih {
                for x in 0..iw {
                    let mut acc = bias[o];
                    for dt in 0..3usize {
                        if t < dt {
                            continue;
                        }
                        let ts = t - dt;
                        for c in 0..ic {
                            for ky in 0..3usize {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= ih as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let sx = x as isize + kx as isize - 1;
                                    if sx < 0 || sx >= iw as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + input.data
                                            [((ts * ic + c) * ih + sy as usize) * iw + sx as usize]
                                            * weight.data
                                                [(((o * ic + c) * 3 + dt) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    out[((t * oc + o) * ih + y) * iw + x] = acc;
                }
            }
        }
    }
    TensorData::new(vec![t_len, oc, ih, iw], out)
}

pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a leaf, zeros if it never received one.
    pub fn of_or_zeros(&self, v: Var, len: usize) -> Vec<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![S::zero(); len],
        }
    }
}
