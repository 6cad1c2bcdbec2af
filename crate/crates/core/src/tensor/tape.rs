//! Wengert-style tape. Nodes are appended in evaluation order, so the node
//! index order is already a topological order and backward is a single
//! reverse sweep.

use std::marker::PhantomData;

use super::{check_dims, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2dSegments {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
        probs: Vec<f64>,
    },
    Bmm {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Vec<Var>),
    MeanLast(Var),
    Sum(Var),
    SumSquares(Var),
    WeightedRmse {
        pred: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.requires_grad(*v));
        let value = Tensor::new(dims, data.into_iter().map(T::from_f64).collect())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_stored(&mut self, name: &str, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Bmm { a, b } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::Pad { x, .. }
            | Op::Softmax { x, .. }
            | Op::MeanLast(x)
            | Op::Sum(x)
            | Op::SumSquares(x) => vec![*x],
            Op::WeightedRmse { pred, .. } => vec![*pred],
            Op::Conv1d { x, w, b } | Op::Conv2dSegments { x, w, b } => vec![*x, *w, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(vs) => vs.clone(),
        }
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn f64s(&self, v: Var) -> Vec<f64> {
        self.value(v).to_f64_vec()
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let d_in = *xd.last().unwrap();
        if wd.len() != 2 || wd[1] != d_in {
            return Err(Error::Shape(format!(
                "linear: input {xd:?} incompatible with weight {wd:?}"
            )));
        }
        let d_out = wd[0];
        if let Some(b) = b {
            if self.dims(b) != [d_out] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} must be [{d_out}]",
                    self.dims(b)
                )));
            }
        }
        let xs = self.f64s(x);
        let ws = self.f64s(w);
        let bs = b.map(|b| self.f64s(b));
        let rows = xs.len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            let xr = &xs[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let wr = &ws[o * d_in..(o + 1) * d_in];
                let mut acc = bs.as_ref().map_or(0.0, |b| b[o]);
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[r * d_out + o] = acc;
            }
        }
        let mut dims = xd;
        *dims.last_mut().unwrap() = d_out;
        self.push("linear", dims, out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.to_f64() + y.to_f64())
            .collect();
        let dims = self.dims(a).to_vec();
        self.push("add", dims, out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.to_f64() * c).collect();
        let dims = self.dims(x).to_vec();
        self.push("scale", dims, out, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.to_f64().tanh()).collect();
        let dims = self.dims(x).to_vec();
        self.push("tanh", dims, out, Op::Tanh(x))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let mut seen = vec![false; xd.len()];
        if perm.len() != xd.len()
            || perm
                .iter()
                .any(|&p| p >= xd.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!("permute: {perm:?} invalid for {xd:?}")));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| xd[p]).collect();
        let src = self.value(x).data();
        let out = permute_data(src, &xd, perm);
        let value = Tensor::new(out_dims, out)?;
        self.push_stored("permute", value, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let n = self.dims(x).len();
        if n < 2 {
            return Err(Error::Shape("transpose needs at least two axes".into()));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        check_dims(dims)?;
        if dims.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::Shape(format!("reshape: {:?} -> {dims:?}", self.dims(x))));
        }
        let value = self.value(x).clone().reshaped(dims.to_vec())?;
        self.push_stored("reshape", value, Op::Reshape(x))
    }

    /// Keeps `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if axis >= xd.len() || len == 0 || start + len > xd[axis] {
            return Err(Error::Shape(format!(
                "narrow: axis {axis} [{start}, {}) out of range for {xd:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&xd, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut dims = xd;
        dims[axis] = len;
        let value = Tensor::new(dims, out)?;
        self.push_stored("narrow", value, Op::Narrow { x, axis, start })
    }

    /// Zero-pads the end of `axis` up to `new_len`.
    pub fn pad(&mut self, x: Var, axis: usize, new_len: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if axis >= xd.len() || new_len < xd[axis] {
            return Err(Error::Shape(format!(
                "pad: cannot pad axis {axis} of {xd:?} to {new_len}"
            )));
        }
        let (outer, n, inner) = split_axis(&xd, axis);
        let src = self.value(x).data();
        let mut out = vec![T::default(); outer * new_len * inner];
        for o in 0..outer {
            out[o * new_len * inner..(o * new_len + n) * inner]
                .copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut dims = xd;
        dims[axis] = new_len;
        let value = Tensor::new(dims, out)?;
        self.push_stored("pad", value, Op::Pad { x, axis })
    }

    /// Kernel-2, stride-2 convolution over `[B, D_in, L]` producing `[B, D_out, L/2]`.
    pub fn conv1d_strided(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 3 {
            return Err(Error::Shape(format!("conv1d: input must be [B, D, L], got {xd:?}")));
        }
        let (batch, d_in, len) = (xd[0], xd[1], xd[2]);
        if wd.len() != 3 || wd[1] != d_in || wd[2] != 2 {
            return Err(Error::Shape(format!(
                "conv1d: weight {wd:?} must be [D_out, {d_in}, 2]"
            )));
        }
        let d_out = wd[0];
        if self.dims(b) != [d_out] {
            return Err(Error::Shape(format!("conv1d: bias must be [{d_out}]")));
        }
        if len < 2 {
            return Err(Error::SequenceTooShort {
                scale: None,
                length: len,
                required: 2,
            });
        }
        let out_len = len / 2;
        let xs = self.f64s(x);
        let ws = self.f64s(w);
        let bs = self.f64s(b);
        let mut out = vec![0.0; batch * d_out * out_len];
        for bi in 0..batch {
            for o in 0..d_out {
                for t in 0..out_len {
                    let mut acc = bs[o];
                    for i in 0..d_in {
                        let xrow = (bi * d_in + i) * len + 2 * t;
                        let wrow = (o * d_in + i) * 2;
                        acc += ws[wrow] * xs[xrow] + ws[wrow + 1] * xs[xrow + 1];
                    }
                    out[(bi * d_out + o) * out_len + t] = acc;
                }
            }
        }
        self.push("conv1d", vec![batch, d_out, out_len], out, Op::Conv1d { x, w, b })
    }

    /// Full-width segment convolution: `[B, N, l, D_in]` with kernel
    /// `[D_out, k, l, D_in]` gives `[B, N, D_out]`. The segment axis is
    /// zero-padded by `(k-1)/2` on each side so `N` is preserved.
    pub fn conv2d_segments(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 4 || wd.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d_segments: input {xd:?} / weight {wd:?} must both be 4-d"
            )));
        }
        let (batch, n, seg, d_in) = (xd[0], xd[1], xd[2], xd[3]);
        let (d_out, k) = (wd[0], wd[1]);
        if k % 2 == 0 {
            return Err(Error::InvalidKernel(format!("segment kernel size {k} must be odd")));
        }
        if wd[2] != seg || wd[3] != d_in {
            return Err(Error::Shape(format!(
                "conv2d_segments: kernel {wd:?} does not match segments {xd:?}"
            )));
        }
        if self.dims(b) != [d_out] {
            return Err(Error::Shape(format!("conv2d_segments: bias must be [{d_out}]")));
        }
        let half = (k - 1) / 2;
        let window = seg * d_in;
        let xs = self.f64s(x);
        let ws = self.f64s(w);
        let bs = self.f64s(b);
        let mut out = vec![0.0; batch * n * d_out];
        for bi in 0..batch {
            for j in 0..n {
                for o in 0..d_out {
                    let mut acc = bs[o];
                    for dk in 0..k {
                        let Some(src) = (j + dk).checked_sub(half).filter(|&s| s < n) else {
                            continue;
                        };
                        let xw = &xs[(bi * n + src) * window..][..window];
                        let ww = &ws[(o * k + dk) * window..][..window];
                        for (a, c) in xw.iter().zip(ww) {
                            acc += a * c;
                        }
                    }
                    out[(bi * n + j) * d_out + o] = acc;
                }
            }
        }
        self.push(
            "conv2d_segments",
            vec![batch, n, d_out],
            out,
            Op::Conv2dSegments { x, w, b },
        )
    }

    /// Scaled dot-product attention over `[B', T, D]`.
    ///
    /// `key_mask` has one flag per `(batch, position)`; `true` marks padding,
    /// which receives exactly zero weight and is skipped in every sum. A
    /// query whose keys are all masked yields a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let qd = self.dims(q).to_vec();
        if qd.len() != 3 || self.dims(k) != qd.as_slice() || self.dims(v) != qd.as_slice() {
            return Err(Error::Shape(format!(
                "attention: q {qd:?}, k {:?}, v {:?} must agree and be 3-d",
                self.dims(k),
                self.dims(v)
            )));
        }
        let (bp, t, d) = (qd[0], qd[1], qd[2]);
        if let Some(m) = key_mask {
            if m.len() != bp * t {
                return Err(Error::Shape(format!(
                    "attention: mask has {} flags, expected {}",
                    m.len(),
                    bp * t
                )));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let qs = self.f64s(q);
        let ks = self.f64s(k);
        let vs = self.f64s(v);
        let masked = |b: usize, s: usize| key_mask.is_some_and(|m| m[b * t + s]);
        let mut probs = vec![0.0; bp * t * t];
        let mut out = vec![0.0; bp * t * d];
        let mut scores = vec![0.0; t];
        for b in 0..bp {
            for i in 0..t {
                let qi = &qs[(b * t + i) * d..][..d];
                let mut max = f64::NEG_INFINITY;
                for s in 0..t {
                    if masked(b, s) {
                        continue;
                    }
                    let ks_row = &ks[(b * t + s) * d..][..d];
                    let mut dot = 0.0;
                    for (x, y) in qi.iter().zip(ks_row) {
                        dot += x * y;
                    }
                    scores[s] = dot * scale;
                    max = max.max(scores[s]);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let prow = &mut probs[(b * t + i) * t..][..t];
                let mut sum = 0.0;
                for s in 0..t {
                    if masked(b, s) {
                        continue;
                    }
                    prow[s] = (scores[s] - max).exp();
                    sum += prow[s];
                }
                let orow = &mut out[(b * t + i) * d..][..d];
                for s in 0..t {
                    if masked(b, s) {
                        continue;
                    }
                    prow[s] /= sum;
                    let vrow = &vs[(b * t + s) * d..][..d];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += prow[s] * x;
                    }
                }
            }
        }
        self.push("attention", qd, out, Op::Attention { q, k, v, scale, probs })
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if axis >= xd.len() {
            return Err(Error::Shape(format!("softmax: axis {axis} out of range for {xd:?}")));
        }
        let (outer, n, inner) = split_axis(&xd, axis);
        let xs = self.f64s(x);
        let mut probs = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xs[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (xs[idx(j)] - max).exp();
                    probs[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    probs[idx(j)] /= sum;
                }
            }
        }
        self.push("softmax", xd, probs.clone(), Op::Softmax { x, axis, probs })
    }

    /// Batched matmul `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] || ad[2] != bd[1] {
            return Err(Error::Shape(format!("bmm: {ad:?} × {bd:?}")));
        }
        let (batch, m, kk, n) = (ad[0], ad[1], ad[2], bd[2]);
        let xs = self.f64s(a);
        let ys = self.f64s(b);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for r in 0..kk {
                        acc += xs[(bi * m + i) * kk + r] * ys[(bi * kk + r) * n + j];
                    }
                    out[(bi * m + i) * n + j] = acc;
                }
            }
        }
        self.push("bmm", vec![batch, m, n], out, Op::Bmm { a, b })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let d = *xd.last().unwrap();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::Shape(format!("layer_norm: affine params must be [{d}]")));
        }
        let xs = self.f64s(x);
        let gs = self.f64s(gamma);
        let bs = self.f64s(beta);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = gs[c] * h + bs[c];
            }
        }
        self.push(
            "layer_norm",
            xd,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let lead = self.dims(first)[..self.dims(first).len() - 1].to_vec();
        for &v in inputs {
            let d = self.dims(v);
            if d.len() != lead.len() + 1 || d[..lead.len()] != lead[..] {
                return Err(Error::Shape(format!("concat: {d:?} vs leading {lead:?}")));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = inputs.iter().map(|&v| *self.dims(v).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut dims = lead;
        dims.push(total);
        let value = Tensor::new(dims, out)?;
        self.push_stored("concat", value, Op::Concat(inputs.to_vec()))
    }

    /// Mean over the last axis. A 1-d input reduces to `[1]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let n = *xd.last().unwrap();
        let xs = self.f64s(x);
        let out: Vec<f64> = xs.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let dims = if xd.len() == 1 {
            vec![1]
        } else {
            xd[..xd.len() - 1].to_vec()
        };
        self.push("mean", dims, out, Op::MeanLast(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.to_f64() * v.to_f64()).sum();
        self.push("sum_squares", vec![1], vec![s], Op::SumSquares(x))
    }

    /// `sqrt(mean(w_i · (pred_i − target_i)²))` over a flat prediction vector.
    pub fn weighted_rmse(&mut self, pred: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(pred).numel();
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "weighted_rmse: {n} predictions, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let ps = self.f64s(pred);
        let mut acc = 0.0;
        for i in 0..n {
            let e = ps[i] - targets[i];
            acc += weights[i] * e * e;
        }
        let loss = (acc / n as f64).sqrt();
        self.push(
            "weighted_rmse",
            vec![1],
            vec![loss],
            Op::WeightedRmse {
                pred,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Grads {
            grads,
            dims,
            _storage: PhantomData,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let wd = self.dims(*w);
                let (d_out, d_in) = (wd[0], wd[1]);
                let rows = g.len() / d_out;
                let xs = self.f64s(*x);
                let ws = self.f64s(*w);
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for o in 0..d_out {
                            let go = g[r * d_out + o];
                            for i in 0..d_in {
                                gx[r * d_in + i] += go * ws[o * d_in + i];
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for r in 0..rows {
                        for o in 0..d_out {
                            let go = g[r * d_out + o];
                            for i in 0..d_in {
                                gw[o * d_in + i] += go * xs[r * d_in + i];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in 0..rows {
                            for o in 0..d_out {
                                gb[o] += g[r * d_out + o];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        for (s, x) in gv.iter_mut().zip(g) {
                            *s += x;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (s, v) in gx.iter_mut().zip(g) {
                        *s += v * c;
                    }
                }
            }
            Op::Tanh(x) => {
                let ys = node.value.to_f64_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - ys[i] * ys[i]);
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let in_dims = self.dims(*x);
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(g, node.value.dims(), &inv);
                    debug_assert_eq!(back.len(), in_dims.iter().product::<usize>());
                    for (s, v) in gx.iter_mut().zip(back) {
                        *s += v;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (s, v) in gx.iter_mut().zip(g) {
                        *s += v;
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_dims = self.dims(*x).to_vec();
                let len = node.value.dims()[*axis];
                if let Some(gx) = self.slot(grads, *x) {
                    let (outer, n, inner) = split_axis(&in_dims, *axis);
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::Pad { x, axis } => {
                let in_dims = self.dims(*x).to_vec();
                let new_len = node.value.dims()[*axis];
                if let Some(gx) = self.slot(grads, *x) {
                    let (outer, n, inner) = split_axis(&in_dims, *axis);
                    for o in 0..outer {
                        for i in 0..n * inner {
                            gx[o * n * inner + i] += g[o * new_len * inner + i];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let xd = self.dims(*x).to_vec();
                let (batch, d_in, len) = (xd[0], xd[1], xd[2]);
                let d_out = self.dims(*w)[0];
                let out_len = len / 2;
                let xs = self.f64s(*x);
                let ws = self.f64s(*w);
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..batch {
                        for o in 0..d_out {
                            for t in 0..out_len {
                                let go = g[(bi * d_out + o) * out_len + t];
                                for i in 0..d_in {
                                    let xrow = (bi * d_in + i) * len + 2 * t;
                                    let wrow = (o * d_in + i) * 2;
                                    gx[xrow] += go * ws[wrow];
                                    gx[xrow + 1] += go * ws[wrow + 1];
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for bi in 0..batch {
                        for o in 0..d_out {
                            for t in 0..out_len {
                                let go = g[(bi * d_out + o) * out_len + t];
                                for i in 0..d_in {
                                    let xrow = (bi * d_in + i) * len + 2 * t;
                                    let wrow = (o * d_in + i) * 2;
                                    gw[wrow] += go * xs[xrow];
                                    gw[wrow + 1] += go * xs[xrow + 1];
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        for o in 0..d_out {
                            for t in 0..out_len {
                                gb[o] += g[(bi * d_out + o) * out_len + t];
                            }
                        }
                    }
                }
            }
            Op::Conv2dSegments { x, w, b } => {
                let xd = self.dims(*x).to_vec();
                let wd = self.dims(*w).to_vec();
                let (batch, n, seg, d_in) = (xd[0], xd[1], xd[2], xd[3]);
                let (d_out, k) = (wd[0], wd[1]);
                let half = (k - 1) / 2;
                let window = seg * d_in;
                let xs = self.f64s(*x);
                let ws = self.f64s(*w);
                let taps = |j: usize, dk: usize| (j + dk).checked_sub(half).filter(|&s| s < n);
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..batch {
                        for j in 0..n {
                            for o in 0..d_out {
                                let go = g[(bi * n + j) * d_out + o];
                                for dk in 0..k {
                                    let Some(src) = taps(j, dk) else { continue };
                                    let gw = &mut gx[(bi * n + src) * window..][..window];
                                    let ww = &ws[(o * k + dk) * window..][..window];
                                    for (s, c) in gw.iter_mut().zip(ww) {
                                        *s += go * c;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for bi in 0..batch {
                        for j in 0..n {
                            for o in 0..d_out {
                                let go = g[(bi * n + j) * d_out + o];
                                for dk in 0..k {
                                    let Some(src) = taps(j, dk) else { continue };
                                    let xw = &xs[(bi * n + src) * window..][..window];
                                    let gww = &mut gw[(o * k + dk) * window..][..window];
                                    for (s, c) in gww.iter_mut().zip(xw) {
                                        *s += go * c;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (r, go) in g.iter().enumerate() {
                        gb[r % d_out] += go;
                    }
                }
            }
            Op::Attention { q, k, v, scale, probs } => {
                let qd = self.dims(*q);
                let (bp, t, d) = (qd[0], qd[1], qd[2]);
                let qs = self.f64s(*q);
                let ks = self.f64s(*k);
                let vs = self.f64s(*v);
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), with dP = G · Vᵀ
                let mut ds = vec![0.0; bp * t * t];
                for b in 0..bp {
                    for i in 0..t {
                        let gi = &g[(b * t + i) * d..][..d];
                        let prow = &probs[(b * t + i) * t..][..t];
                        let mut dp = vec![0.0; t];
                        let mut dot = 0.0;
                        for s in 0..t {
                            if prow[s] == 0.0 {
                                continue;
                            }
                            let vrow = &vs[(b * t + s) * d..][..d];
                            dp[s] = gi.iter().zip(vrow).map(|(x, y)| x * y).sum();
                            dot += prow[s] * dp[s];
                        }
                        for s in 0..t {
                            ds[(b * t + i) * t + s] = prow[s] * (dp[s] - dot);
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for b in 0..bp {
                        for i in 0..t {
                            let gi = &g[(b * t + i) * d..][..d];
                            for s in 0..t {
                                let p = probs[(b * t + i) * t + s];
                                if p == 0.0 {
                                    continue;
                                }
                                let gvr = &mut gv[(b * t + s) * d..][..d];
                                for (a, x) in gvr.iter_mut().zip(gi) {
                                    *a += p * x;
                                }
                            }
                        }
                    }
                }
                if let Some(gq) = self.slot(grads, *q) {
                    for b in 0..bp {
                        for i in 0..t {
                            let gqr = &mut gq[(b * t + i) * d..][..d];
                            for s in 0..t {
                                let c = ds[(b * t + i) * t + s] * scale;
                                if c == 0.0 {
                                    continue;
                                }
                                let krow = &ks[(b * t + s) * d..][..d];
                                for (a, x) in gqr.iter_mut().zip(krow) {
                                    *a += c * x;
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, *k) {
                    for b in 0..bp {
                        for i in 0..t {
                            let qrow = &qs[(b * t + i) * d..][..d];
                            for s in 0..t {
                                let c = ds[(b * t + i) * t + s] * scale;
                                if c == 0.0 {
                                    continue;
                                }
                                let gkr = &mut gk[(b * t + s) * d..][..d];
                                for (a, x) in gkr.iter_mut().zip(qrow) {
                                    *a += c * x;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis, probs } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let (outer, n, inner) = split_axis(node.value.dims(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| probs[idx(j)] * g[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += probs[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b } => {
                let ad = self.dims(*a);
                let (batch, m, kk) = (ad[0], ad[1], ad[2]);
                let n = self.dims(*b)[2];
                let xs = self.f64s(*a);
                let ys = self.f64s(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..batch {
                        for i in 0..m {
                            for r in 0..kk {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[(bi * m + i) * n + j] * ys[(bi * kk + r) * n + j];
                                }
                                ga[(bi * m + i) * kk + r] += acc;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        for r in 0..kk {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += xs[(bi * m + i) * kk + r] * g[(bi * m + i) * n + j];
                                }
                                gb[(bi * kk + r) * n + j] += acc;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.value.dims().last().unwrap();
                let rows = g.len() / d;
                let gs = self.f64s(*gamma);
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(&gs).map(|(a, c)| a * c).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, h)| a * h).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (i, go) in g.iter().enumerate() {
                        gg[i % d] += go * xhat[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for (i, go) in g.iter().enumerate() {
                        gb[i % d] += go;
                    }
                }
            }
            Op::Concat(inputs) => {
                let widths: Vec<usize> = inputs.iter().map(|&v| *self.dims(v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(&widths) {
                    if let Some(gv) = self.slot(grads, v) {
                        for r in 0..rows {
                            for c in 0..w {
                                gv[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanLast(x) => {
                let n = *self.dims(*x).last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, s) in gx.iter_mut().enumerate() {
                        *s += g[i / n] / n as f64;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for s in gx.iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::SumSquares(x) => {
                let xs = self.f64s(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for (s, v) in gx.iter_mut().zip(xs) {
                        *s += 2.0 * v * g[0];
                    }
                }
            }
            Op::WeightedRmse { pred, targets, weights } => {
                let loss = node.value.data()[0].to_f64();
                let ps = self.f64s(*pred);
                let n = ps.len() as f64;
                if let Some(gp) = self.slot(grads, *pred) {
                    // the square root is not differentiable at zero residual
                    if loss > 0.0 {
                        for i in 0..ps.len() {
                            gp[i] += g[0] * weights[i] * (ps[i] - targets[i]) / (n * loss);
                        }
                    }
                }
            }
        }
    }
}

fn permute_data<U: Copy>(src: &[U], dims: &[usize], perm: &[usize]) -> Vec<U> {
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_dims.len()];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_dims[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`], accumulated in `f64`.
pub struct Grads<T> {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
    _storage: PhantomData<T>,
}

impl<T: Real> Grads<T> {
    /// `None` when `v` does not influence the loss through differentiable inputs.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::from_f64(self.dims[v.0].clone(), g).ok()
    }

    pub fn get_f64(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), v).unwrap()
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.constant(t64(&[1, 1, 2], &[1.0, 1.0])).unwrap();
        let b = tape.constant(t64(&[1], &[0.0])).unwrap();
        let y = tape.conv1d_strided(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

        let x = tape.constant(t64(&[1, 1, 4], &[5.0, 9.0, 2.0, 8.0])).unwrap();
        let w = tape.constant(t64(&[1, 1, 2], &[1.0, 0.0])).unwrap();
        let y = tape.conv1d_strided(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 2.0]);

        let x = tape.constant(Tensor::zeros(vec![2, 3, 10])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![3, 3, 2])).unwrap();
        let b3 = tape.constant(Tensor::zeros(vec![3])).unwrap();
        let y = tape.conv1d_strided(x, w, b3).unwrap();
        assert_eq!(tape.dims(y), &[2, 3, 5]);
    }

    #[test]
    fn conv1d_rejects_single_position() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 1])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![1, 1, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(
            tape.conv1d_strided(x, w, b),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn conv2d_segments_examples() {
        let mut tape = Tape::<f64>::new();
        // two segments of length 2, one channel
        let x = tape.constant(t64(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.constant(t64(&[1, 1, 2, 1], &[1.0, 1.0])).unwrap();
        let b = tape.constant(t64(&[1], &[0.0])).unwrap();
        let y = tape.conv2d_segments(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

        // k = 3 on a single segment: padded neighbours contribute nothing
        let x1 = tape.constant(t64(&[1, 1, 2, 1], &[1.0, 2.0])).unwrap();
        let w3 = tape.constant(Tensor::full(vec![1, 3, 2, 1], 1.0)).unwrap();
        let y3 = tape.conv2d_segments(x1, w3, b).unwrap();
        let y1 = tape.conv2d_segments(x1, w, b).unwrap();
        assert_eq!(tape.value(y3).data(), tape.value(y1).data());

        let x = tape.constant(Tensor::zeros(vec![2, 5, 4, 8])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![6, 3, 4, 8])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![6])).unwrap();
        let y = tape.conv2d_segments(x, w, b).unwrap();
        assert_eq!(tape.dims(y), &[2, 5, 6]);
    }

    #[test]
    fn conv2d_segments_rejects_even_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 2, 1])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![1, 2, 2, 1])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(tape.conv2d_segments(x, w, b), Err(Error::InvalidKernel(_))));
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1], &[3.0])).unwrap();
        let w = tape.constant(t64(&[1, 1], &[2.0])).unwrap();
        let b = tape.constant(t64(&[1], &[1.0])).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);

        let xs: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t64(&[2, 3, 4], &xs)).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let w = tape.constant(t64(&[4, 4], &eye)).unwrap();
        let b = tape.constant(Tensor::zeros(vec![4])).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.dims(y), &[2, 3, 4]);
        assert_eq!(tape.value(y).data(), xs.as_slice());

        let bad = tape.constant(Tensor::zeros(vec![4, 5])).unwrap();
        assert!(matches!(tape.linear(x, bad, None), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_examples() {
        let mut tape = Tape::<f64>::new();
        // T = 1: output is v
        let v1 = tape.constant(t64(&[1, 1, 2], &[4.0, -1.0])).unwrap();
        let q1 = tape.constant(t64(&[1, 1, 2], &[0.3, 0.7])).unwrap();
        let y = tape.attention(q1, q1, v1, None).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, -1.0]);

        // q = k = 0: uniform weights, output = mean of unmasked values
        let z = tape.constant(Tensor::zeros(vec![1, 3, 1])).unwrap();
        let v = tape.constant(t64(&[1, 3, 1], &[1.0, 2.0, 6.0])).unwrap();
        let y = tape.attention(z, z, v, None).unwrap();
        for o in tape.value(y).data() {
            assert!((o - 3.0).abs() < 1e-12);
        }
        let y = tape.attention(z, z, v, Some(&[false, false, true])).unwrap();
        for o in tape.value(y).data() {
            assert!((o - 1.5).abs() < 1e-12);
        }

        // mask the last of two tokens: every position reads v[0]
        let q = tape.constant(t64(&[1, 2, 2], &[1.0, 2.0, -3.0, 0.5])).unwrap();
        let v = tape.constant(t64(&[1, 2, 2], &[7.0, 8.0, 9.0, 10.0])).unwrap();
        let y = tape.attention(q, q, v, Some(&[false, true])).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 8.0, 7.0, 8.0]);

        // all keys masked: zero row
        let y = tape.attention(q, q, v, Some(&[true, true])).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.constant(t64(&[2, 3, 4], &xs)).unwrap();
        let p = tape.permute(x, &[0, 2, 1]).unwrap();
        assert_eq!(tape.dims(p), &[2, 4, 3]);
        // p[0, 1, 2] == x[0, 2, 1]
        assert_eq!(tape.value(p).data()[3 + 2], xs[2 * 4 + 1]);
        let back = tape.permute(p, &[0, 2, 1]).unwrap();
        assert_eq!(tape.value(back).data(), xs.as_slice());
    }

    #[test]
    fn narrow_and_pad_are_inverse_on_kept_region() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = tape.constant(t64(&[2, 3, 2], &xs)).unwrap();
        let p = tape.pad(x, 1, 5).unwrap();
        assert_eq!(tape.dims(p), &[2, 5, 2]);
        assert_eq!(&tape.value(p).data()[6..10], &[0.0; 4]);
        let n = tape.narrow(p, 1, 0, 3).unwrap();
        assert_eq!(tape.value(n).data(), xs.as_slice());
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let build = || {
            let mut tape = Tape::<f32>::new();
            let xs: Vec<f64> = (0..48).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect();
            let x = tape.constant(Tensor::from_f64(vec![2, 4, 6], &xs).unwrap()).unwrap();
            let y = tape.attention(x, x, x, None).unwrap();
            let s = tape.softmax(y, 1).unwrap();
            tape.value(s).clone()
        };
        let a = build();
        let b = build();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1], &[1e300])).unwrap();
        let w = tape.constant(t64(&[1, 1], &[1e300])).unwrap();
        assert!(matches!(tape.linear(x, w, None), Err(Error::NonFinite(_))));
        assert!(tape.leaf(t64(&[1], &[f64::NAN]), true).is_err());
    }

    #[test]
    fn weighted_rmse_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t64(&[2], &[1.0, 1.0])).unwrap();
        let l = tape.weighted_rmse(p, &[0.0, 0.0], &[1.0, 4.0]).unwrap();
        assert!((tape.value(l).data()[0] - 2.5f64.sqrt()).abs() < 1e-12);
        let l = tape.weighted_rmse(p, &[1.0, 1.0], &[1.0, 4.0]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        assert!(tape.weighted_rmse(p, &[1.0], &[1.0]).is_err());
    }
}
