//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op in execution order. Values are computed
//! eagerly; [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients into every node that depends on a variable leaf.
//! Nodes created with [`Graph::constant`] never receive gradients, and ops
//! whose inputs are all constants are skipped during the backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics and hyperparameters of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddConst(Var),
    AddBroadcast(Var, Var),
    Concat { a: Var, b: Var, outer: usize, inner_a: usize, inner_b: usize },
    Repeat { x: Var, times: usize },
    Mix { w: Var, x: Var, batch: usize, g: usize, n: usize, l: usize },
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Softmax(Var),
    Gelu(Var),
    Square(Var),
    Log1p(Var),
    RowNorm(Var),
    Narrow { x: Var, outer: usize, span: usize, start: usize, len: usize, inner: usize },
    Permute { x: Var, src_index: Vec<usize> },
    Reshape(Var),
    MeanAxis { x: Var, outer: usize, n: usize, inner: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Conv1d { x: Var, w: Var, b: Var },
    AvgPool { x: Var, k: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MaskedMse { pred: Var, target: Vec<f64>, mask: Vec<f64>, count: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The autograd tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu(x: f64) -> f64 {
    x * erf_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    erf_cdf(x) + x * pdf
}

fn permute_source_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut src = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        src.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    src
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs = self.needs(inputs);
        Ok(self.push_raw(value, op, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// 2-D product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product over equal leading dims: `[..., m, k]·[..., k, n]`,
    /// or `[..., m, k]·[..., n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || dim_err("bmm", format!("cannot batch-multiply {sa:?} by {sb:?} (trans_b={trans_b})"));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(bad());
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for s in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[s * m * k..(s + 1) * m * k],
                    false,
                    &bv[s * k * n..(s + 1) * k * n],
                    trans_b,
                    &mut out[s * m * n..(s + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let value = Tensor::new(&shape, out)?;
        self.push("bmm", value, Op::BatchMatMul { a, b, trans_b, batch, m, k, n }, &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[..., n] + bias[n]`, broadcasting over all leading dims.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(dim_err("add_row_bias", format!("bias {:?} for rows of {n}", self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push("add_row_bias", value, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Adds a constant whose shape matches the trailing dims of `x`
    /// (broadcast over leading dims). Entries may be `-inf`, as for attention masks.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let sx = self.shape(x);
        let r = c.rank();
        if r > sx.len() || sx[sx.len() - r..] != *c.shape() {
            return Err(dim_err("add_const", format!("cannot broadcast {:?} onto {:?}", c.shape(), sx)));
        }
        let n = c.numel().max(1);
        let mut data = self.value(x).data().to_vec();
        for block in data.chunks_mut(n) {
            block.iter_mut().zip(c.data()).for_each(|(v, cv)| *v += cv);
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "add_const" });
        }
        let value = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push_raw(value, Op::AddConst(x), needs))
    }

    /// `x + y` where `y`'s shape equals the trailing dims of `x`; `y` receives the
    /// gradient summed over the broadcast leading dims.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(dim_err("add_broadcast", format!("cannot broadcast {sy:?} onto {sx:?}")));
        }
        let n = self.value(y).numel().max(1);
        let yv = self.value(y).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for block in data.chunks_mut(n) {
            block.iter_mut().zip(&yv).for_each(|(v, c)| *v += c);
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push("add_broadcast", value, Op::AddBroadcast(x, y), &[x, y])
    }

    /// Concatenates along `dim`; all other extents must match.
    pub fn concat(&mut self, a: Var, b: Var, dim: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && dim < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == dim || x == y);
        if !ok {
            return Err(dim_err("concat", format!("{sa:?} and {sb:?} along dim {dim}")));
        }
        let outer = numel(&sa[..dim]);
        let inner_a = numel(&sa[dim..]);
        let inner_b = numel(&sb[dim..]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av[o * inner_a..(o + 1) * inner_a]);
            data.extend_from_slice(&bv[o * inner_b..(o + 1) * inner_b]);
        }
        let mut shape = sa;
        shape[dim] += sb[dim];
        let value = Tensor::new(&shape, data)?;
        self.push("concat", value, Op::Concat { a, b, outer, inner_a, inner_b }, &[a, b])
    }

    /// Stacks `times` copies of `x` along a new leading dim.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        let mut shape = alloc::vec![times];
        shape.extend_from_slice(self.shape(x));
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let value = Tensor::new(&shape, data)?;
        self.push("repeat", value, Op::Repeat { x, times }, &[x])
    }

    /// Applies one shared matrix `w[G, N]` to every batch item of `x[B, N, L]`, giving `[B, G, L]`.
    pub fn mix(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 3 || sw[1] != sx[1] {
            return Err(dim_err("mix", format!("weights {sw:?} for input {sx:?}")));
        }
        let (batch, n, l) = (sx[0], sx[1], sx[2]);
        let gdim = sw[0];
        let mut out = alloc::vec![0.0; batch * gdim * l];
        {
            let (wv, xv) = (self.value(w).data(), self.value(x).data());
            for b in 0..batch {
                gemm(gdim, n, l, wv, false, &xv[b * n * l..(b + 1) * n * l], false, &mut out[b * gdim * l..(b + 1) * gdim * l], 0.0);
            }
        }
        let value = Tensor::new(&[batch, gdim, l], out)?;
        self.push("mix", value, Op::Mix { w, x, batch, g: gdim, n, l }, &[w, x])
    }

    /// Elementwise product with a same-shape constant (used for dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(dim_err("mul_const", format!("{} factors for {:?}", c.len(), self.shape(x))));
        }
        let data = self.value(x).data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push("mul_const", value, Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(name, value, op, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, Op::Gelu(x), gelu)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, Op::Square(x), |v| v * v)
    }

    pub fn log1p(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= -1.0) {
            return Err(Error::Domain("log1p argument must exceed -1".into()));
        }
        self.map("log1p", x, Op::Log1p(x), libm::log1p)
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if n == 0 {
            return Err(dim_err("softmax", "empty last dimension".into()));
        }
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            softmax_row(row).map_err(|_| Error::DegenerateRow { op: "softmax", row: r })?;
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Divides each last-dim row by its sum. Rows must have positive sum.
    pub fn rownorm(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateRow { op: "rownorm", row: r });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push("rownorm", value, Op::RowNorm(x), &[x])
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(dim_err("narrow", format!("[{start}, {}) along dim {dim} of {shape:?}", start + len)));
        }
        let outer = numel(&shape[..dim]);
        let inner = numel(&shape[dim + 1..]);
        let span = shape[dim];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * span + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[dim] = len;
        let value = Tensor::new(&out_shape, data)?;
        self.push("narrow", value, Op::Narrow { x, outer, span, start, len, inner }, &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let src_index = permute_source_index(&shape, perm);
        let src = self.value(x).data();
        let data = src_index.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, data)?;
        self.push("permute", value, Op::Permute { x, src_index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(dim_err("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let s = &src[(o * n + a) * inner..(o * n + a + 1) * inner];
                data[o * inner..(o + 1) * inner].iter_mut().zip(s).for_each(|(d, v)| *d += v);
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(&out_shape, data)?;
        self.push("mean_axis", value, Op::MeanAxis { x, outer, n, inner }, &[x])
    }

    /// Batch normalization of `x[rows, F]` per feature column.
    ///
    /// Train mode normalizes with the biased batch statistics and folds them
    /// into `state` with its momentum; eval mode reads the running statistics only.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, mode: Mode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err("batchnorm", format!("expected [rows, F], got {shape:?}")));
        }
        let (rows, f) = (shape[0], shape[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] || state.running_mean.len() != f {
            return Err(dim_err("batchnorm", format!("affine/state size mismatch for {f} features")));
        }
        let train = mode == Mode::Train;
        if train && rows < 2 {
            return Err(Error::InsufficientBatch { rows });
        }
        let xv = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; f];
            for row in xv.chunks(f) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; f];
            for row in xv.chunks(f) {
                for j in 0..f {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + state.epsilon)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * f);
        let mut out = Vec::with_capacity(rows * f);
        for row in xv.chunks(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        if train {
            let m = state.momentum;
            for j in 0..f {
                state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
                state.running_var[j] = (1.0 - m) * state.running_var[j] + m * var[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("batchnorm", value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta])
    }

    /// Valid 1-D convolution of every row of `x[rows, L]` with a shared filter
    /// bank `w[F, K]` plus bias `b[F]`, giving `[rows, F, L - K + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sw[1] > sx[1] || sw[1] == 0 || self.shape(b) != [sw[0]] {
            return Err(dim_err("conv1d", format!("input {sx:?}, filters {sw:?}")));
        }
        let (rows, l) = (sx[0], sx[1]);
        let (f, k) = (sw[0], sw[1]);
        let lo = l - k + 1;
        let mut out = vec![0.0; rows * f * lo];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for r in 0..rows {
                let y = &mut out[r * f * lo..(r + 1) * f * lo];
                for (fi, yrow) in y.chunks_mut(lo).enumerate() {
                    yrow.iter_mut().for_each(|v| *v = bv[fi]);
                }
                // Toeplitz view: element [k, t] of the window matrix is x[t + k].
                toeplitz_gemm(f, k, lo, wv, &xv[r * l..(r + 1) * l], y);
            }
        }
        let value = Tensor::new(&[rows, f, lo], out)?;
        self.push("conv1d", value, Op::Conv1d { x, w, b }, &[x, w, b])
    }

    /// Non-overlapping average pooling over the last dim; `k` must divide it.
    pub fn avgpool(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if k == 0 || n % k != 0 {
            return Err(dim_err("avgpool", format!("window {k} does not divide {n}")));
        }
        let inv = 1.0 / k as f64;
        let data = self.value(x).data().chunks(k).map(|w| w.iter().sum::<f64>() * inv).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n / k;
        let value = Tensor::new(&out_shape, data)?;
        self.push("avgpool", value, Op::AvgPool { x, k }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(dim_err("mean", "empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean cross-entropy of `logits[B, S]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(dim_err("cross_entropy", format!("logits {shape:?} for {} labels", labels.len())));
        }
        let s = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= s) {
            return Err(Error::Label { label: bad, classes: s });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(s).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[labels[r]];
            row.iter_mut().for_each(|v| *v = libm::exp(*v - lse));
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Mean squared error over entries where `mask` is nonzero (mask acts as a weight).
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, mask: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || mask.len() != p.numel() {
            return Err(dim_err("masked_mse", format!("pred {:?} vs target {:?}", p.shape(), target.shape())));
        }
        let count: f64 = mask.iter().sum();
        if !(count > 0.0) {
            return Err(Error::Argument("masked_mse needs at least one unmasked entry".into()));
        }
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .map(|((a, b), m)| m * (a - b) * (a - b))
            .sum::<f64>()
            / count;
        let op = Op::MaskedMse { pred, target: target.data().to_vec(), mask: mask.to_vec(), count };
        self.push("masked_mse", Tensor::scalar(loss), op, &[pred])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Rank { numel });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            // Only leaf gradients are kept; intermediate buffers are dropped as soon as they are consumed.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Lazily allocated accumulation buffer for an input, or None if it is constant.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = acc!(*a) {
                    gemm(m, n, k, g, false, val(*b), true, da, 1.0);
                }
                if let Some(db) = acc!(*b) {
                    gemm(k, m, n, val(*a), true, g, false, db, 1.0);
                }
            }
            &Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                if let Some(da) = acc!(a) {
                    let bv = val(b);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        gemm(m, n, k, gs, false, bs, !trans_b, &mut da[s * m * k..(s + 1) * m * k], 1.0);
                    }
                }
                if let Some(db) = acc!(b) {
                    let av = val(a);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gs, true, as_, false, dbs, 1.0);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, dbs, 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).zip(val(*b)).for_each(|((d, g), o)| *d += g * o);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(g).zip(val(*a)).for_each(|((d, g), o)| *d += g * o);
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::AddBroadcast(x, y) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(dy) = acc!(*y) {
                    let n = dy.len().max(1);
                    for block in g.chunks(n) {
                        dy.iter_mut().zip(block).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Concat { a, b, outer, inner_a, inner_b } => {
                let stride = inner_a + inner_b;
                if let Some(d) = acc!(a) {
                    for o in 0..outer {
                        let src = &g[o * stride..o * stride + inner_a];
                        d[o * inner_a..(o + 1) * inner_a].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(d) = acc!(b) {
                    for o in 0..outer {
                        let src = &g[o * stride + inner_a..(o + 1) * stride];
                        d[o * inner_b..(o + 1) * inner_b].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Repeat { x, times } => {
                if let Some(d) = acc!(x) {
                    let n = d.len();
                    for t in 0..times {
                        d.iter_mut().zip(&g[t * n..(t + 1) * n]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Mix { w, x, batch, g: gdim, n, l } => {
                if let Some(dw) = acc!(w) {
                    let xv = val(x);
                    for b in 0..batch {
                        gemm(gdim, l, n, &g[b * gdim * l..(b + 1) * gdim * l], false, &xv[b * n * l..(b + 1) * n * l], true, dw, 1.0);
                    }
                }
                if let Some(dx) = acc!(x) {
                    let wv = val(w);
                    for b in 0..batch {
                        gemm(n, gdim, l, wv, true, &g[b * gdim * l..(b + 1) * gdim * l], false, &mut dx[b * n * l..(b + 1) * n * l], 1.0);
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).zip(c).for_each(|((d, g), c)| *d += g * c);
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                if let Some(d) = acc!(*x) {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).zip(val(*x)).for_each(|((d, g), v)| *d += g * gelu_grad(*v));
                }
            }
            Op::Square(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).zip(val(*x)).for_each(|((d, g), v)| *d += 2.0 * g * v);
                }
            }
            Op::Log1p(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).zip(val(*x)).for_each(|((d, g), v)| *d += g / (1.0 + v));
                }
            }
            Op::RowNorm(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let xv = val(*x);
                if let Some(d) = acc!(*x) {
                    for (r, drow) in d.chunks_mut(n).enumerate() {
                        let s: f64 = xv[r * n..(r + 1) * n].iter().sum();
                        let grow = &g[r * n..(r + 1) * n];
                        let yrow = &y[r * n..(r + 1) * n];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += (grow[j] - dot) / s;
                        }
                    }
                }
            }
            &Op::Narrow { x, outer, span, start, len, inner } => {
                if let Some(d) = acc!(x) {
                    for o in 0..outer {
                        let base = (o * span + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Permute { x, src_index } => {
                if let Some(d) = acc!(*x) {
                    for (gi, &si) in g.iter().zip(src_index) {
                        d[si] += gi;
                    }
                }
            }
            &Op::MeanAxis { x, outer, n, inner } => {
                if let Some(d) = acc!(x) {
                    let inv = 1.0 / n as f64;
                    for o in 0..outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for a in 0..n {
                            let ds = &mut d[(o * n + a) * inner..(o * n + a + 1) * inner];
                            ds.iter_mut().zip(gs).for_each(|(d, g)| *d += g * inv);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let f = inv_std.len();
                let rows = xhat.len() / f;
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                let gam = val(*gamma);
                if let Some(d) = acc!(*x) {
                    let nf = rows as f64;
                    for ((drow, grow), hrow) in d.chunks_mut(f).zip(g.chunks(f)).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            let scale = gam[j] * inv_std[j];
                            drow[j] += if *train {
                                scale * (grow[j] - sum_g[j] / nf - hrow[j] * sum_gx[j] / nf)
                            } else {
                                scale * grow[j]
                            };
                        }
                    }
                }
                if let Some(d) = acc!(*gamma) {
                    d.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = acc!(*beta) {
                    d.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Conv1d { x, w, b } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (rows, l, f, k) = (sx[0], sx[1], sw[0], sw[1]);
                let lo = l - k + 1;
                if let Some(db) = acc!(*b) {
                    for yrow in g.chunks(lo).enumerate() {
                        let (idx, row) = yrow;
                        db[idx % f] += row.iter().sum::<f64>();
                    }
                }
                if let Some(dw) = acc!(*w) {
                    let xv = val(*x);
                    for r in 0..rows {
                        // dw[F, K] += g_r[F, lo] · window[lo, K], window[t, k] = x[t + k]
                        let gr = &g[r * f * lo..(r + 1) * f * lo];
                        window_gemm(f, lo, k, gr, &xv[r * l..(r + 1) * l], dw);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let wv = val(*w);
                    let mut p = vec![0.0; lo * k];
                    for r in 0..rows {
                        let gr = &g[r * f * lo..(r + 1) * f * lo];
                        // p[lo, K] = g_rᵀ · w, then scatter along diagonals.
                        gemm(lo, f, k, gr, true, wv, false, &mut p, 0.0);
                        let dxr = &mut dx[r * l..(r + 1) * l];
                        for t in 0..lo {
                            let prow = &p[t * k..(t + 1) * k];
                            dxr[t..t + k].iter_mut().zip(prow).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::AvgPool { x, k } => {
                if let Some(d) = acc!(*x) {
                    let inv = 1.0 / *k as f64;
                    for (dw, gv) in d.chunks_mut(*k).zip(g) {
                        dw.iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = acc!(*x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(d) = acc!(*logits) {
                    let b = labels.len();
                    let s = probs.len() / b;
                    let scale = g[0] / b as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..s {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[r * s + j] += scale * (probs[r * s + j] - onehot);
                        }
                    }
                }
            }
            Op::MaskedMse { pred, target, mask, count } => {
                if let Some(d) = acc!(*pred) {
                    let pv = val(*pred);
                    let scale = 2.0 * g[0] / count;
                    for i in 0..d.len() {
                        d[i] += scale * mask[i] * (pv[i] - target[i]);
                    }
                }
            }
        }
    }
}

/// Stable in-place softmax of one row. Fails if every entry is `-inf`.
pub(crate) fn softmax_row(row: &mut [f64]) -> core::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(());
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}

/// `y[F, lo] += w[F, K] · window` with `window[k, t] = x[t + k]`.
fn toeplitz_gemm(f: usize, k: usize, lo: usize, w: &[f64], x: &[f64], y: &mut [f64]) {
    debug_assert!(x.len() >= lo + k - 1 && y.len() >= f * lo && w.len() >= f * k);
    // SAFETY: the overlapping window view only reads x[0 .. lo + k - 1].
    unsafe {
        matrixmultiply::dgemm(
            f, k, lo, 1.0,
            w.as_ptr(), k as isize, 1,
            x.as_ptr(), 1, 1,
            1.0,
            y.as_mut_ptr(), lo as isize, 1,
        );
    }
}

/// `dw[F, K] += g[F, lo] · window` with `window[t, k] = x[t + k]`.
fn window_gemm(f: usize, lo: usize, k: usize, g: &[f64], x: &[f64], dw: &mut [f64]) {
    debug_assert!(x.len() >= lo + k - 1 && g.len() >= f * lo && dw.len() >= f * k);
    // SAFETY: as in `toeplitz_gemm`, the window view stays inside x.
    unsafe {
        matrixmultiply::dgemm(
            f, lo, k, 1.0,
            g.as_ptr(), lo as isize, 1,
            x.as_ptr(), 1, 1,
            1.0,
            dw.as_mut_ptr(), k as isize, 1,
        );
    }
}
