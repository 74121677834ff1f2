//! Computation graph recorded during the forward pass and swept in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;

use super::conv::{col2im, im2col, Geom};
use super::param::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{shape, validation, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var),
    SumAxis(Var, usize),
    Conv2d(Var, Var, Option<Var>, Geom),
    ConvTranspose2d(Var, Var, Option<Var>, Geom),
    Dropout(Var, Vec<T>),
    SoftmaxCe(Var, Vec<T>, Vec<T>),
    Mse(Var, Var, bool),
    CenterLoss(Var, Vec<Option<usize>>, Vec<T>, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in topological order, so the
/// backward sweep is a reverse scan.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_index_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    // returns (out_shape, map) where out[i] = in[map[i]]
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Enables a NaN/Inf check on every recorded value.
    pub fn with_finite_check(mut self) -> Self {
        self.check_finite = true;
        self
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(validation(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false).expect("finite constant")
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true).expect("finite input")
    }

    /// Records a parameter leaf; its gradient flows back to the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), true).expect("finite parameter")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, n, k, T::one(), self.data(a), self.data(b), T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng)
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape("batch_matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bt {
            T::gemm(
                false,
                false,
                m,
                n,
                k,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![bt, m, n], out)?, Op::BatchMatMul(a, b), ng)
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape("add_bias", format!("{:?} + {:?}", sx, sb)));
        }
        let n = sb[0];
        let bias = self.data(b);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let t = Tensor::new(sx.to_vec(), out)?;
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddBias(x, b), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out: Vec<T> = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let k = *s.last().ok_or_else(|| shape("softmax", "rank-0 input"))?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(s, out)?, Op::Softmax(a), ng)
    }

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        if numel(&new_shape) != numel(self.shape(a)) {
            return Err(shape("reshape", format!("{:?} -> {:?}", self.shape(a), new_shape)));
        }
        let t = Tensor::new(new_shape, self.data(a).to_vec())?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape("permute", format!("{:?} by {:?}", s, perm)));
        }
        let (out_shape, map) = permute_index_map(&s, perm);
        let src = self.data(a);
        let out: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(out_shape, out)?, Op::Permute(a, perm.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape("concat", format!("axis {} on {:?}", axis, base)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(out_shape, out)?, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape("slice", format!("{}..{} on axis {} of {:?}", start, end, axis, s)));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = end - start;
        let ng = self.ng(a);
        self.push(Tensor::new(out_shape, out)?, Op::Slice(a, axis, start), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let ng = self.ng(a);
        self.push(Tensor::scalar(total), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape("sum_axis", format!("axis {} of {:?}", axis, s)));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        let ng = self.ng(a);
        self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a, axis), ng)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::of(len as f64))
    }

    /// 2-D convolution. `x: [n, c, h, w]`, `w: [o, c, kh, kw]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: Geom) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != g.kh || sw[3] != g.kw {
            return Err(shape("conv2d", format!("input {:?}, kernel {:?}", sx, sw)));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape("conv2d", "bias length must equal output channels"));
            }
        }
        let (n, c, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        let (ho, wo) = g
            .conv_out(h, wi)
            .ok_or_else(|| shape("conv2d", format!("kernel larger than padded input {:?}", sx)))?;
        let ckk = c * g.kh * g.kw;
        let plane = ho * wo;
        let mut cols = vec![T::zero(); ckk * plane];
        let mut out = vec![T::zero(); n * o * plane];
        let (xd, wd) = (self.data(x), self.data(w));
        for i in 0..n {
            im2col(&xd[i * c * h * wi..(i + 1) * c * h * wi], c, h, wi, g, ho, wo, &mut cols);
            T::gemm(false, false, o, plane, ckk, T::one(), wd, &cols, T::zero(), &mut out[i * o * plane..(i + 1) * o * plane]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.data(b), o, plane);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, o, ho, wo], out)?, Op::Conv2d(x, w, b, g), ng)
    }

    /// Transposed convolution. `x: [n, ci, h, w]`, `w: [ci, co, kh, kw]`.
    /// `out_pad` adds rows/columns at the bottom/right so an encoder's input
    /// extent can be matched exactly.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Geom,
        out_pad: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != g.kh || sw[3] != g.kw {
            return Err(shape("conv_transpose2d", format!("input {:?}, kernel {:?}", sx, sw)));
        }
        if out_pad.0 >= g.sh.max(1) || out_pad.1 >= g.sw.max(1) {
            return Err(shape("conv_transpose2d", "output padding must be smaller than stride"));
        }
        let (n, ci, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape("conv_transpose2d", "bias length must equal output channels"));
            }
        }
        let (ho, wo) = g
            .transpose_out(h, wi, out_pad.0, out_pad.1)
            .ok_or_else(|| shape("conv_transpose2d", "padding exceeds output extent"))?;
        let ckk = co * g.kh * g.kw;
        let plane_in = h * wi;
        let plane_out = ho * wo;
        let mut cols = vec![T::zero(); ckk * plane_in];
        let mut out = vec![T::zero(); n * co * plane_out];
        let (xd, wd) = (self.data(x), self.data(w));
        for i in 0..n {
            T::gemm(true, false, ckk, plane_in, ci, T::one(), wd, &xd[i * ci * plane_in..(i + 1) * ci * plane_in], T::zero(), &mut cols);
            col2im(&cols, co, ho, wo, g, h, wi, &mut out[i * co * plane_out..(i + 1) * co * plane_out]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.data(b), co, plane_out);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, co, ho, wo], out)?, Op::ConvTranspose2d(x, w, b, g), ng)
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: rand::RngCore>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(validation(format!("dropout probability {} not in [0, 1)", p)));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a);
        self.push(t, Op::Dropout(a, mask), ng)
    }

    /// Mean over rows of `-sum(targets * log_softmax(logits))`.
    /// `targets` is `n x k` row-major and each row must sum to one.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] * s[1] {
            return Err(shape("softmax_cross_entropy", format!("logits {:?}, {} targets", s, targets.len())));
        }
        let (n, k) = (s[0], s[1]);
        for (r, row) in targets.chunks(k).enumerate() {
            let total = row.iter().fold(0.0, |a, v| a + v.f64());
            if row.iter().any(|v| *v < T::zero()) || (total - 1.0).abs() > 1e-5 {
                return Err(validation(format!("target row {} is not a distribution (sum {})", r, total)));
            }
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, t) in probs.chunks_mut(k).zip(targets.chunks(k)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            for (p, &ti) in row.iter_mut().zip(t) {
                let logp = *p - lse;
                if ti > T::zero() {
                    loss -= ti * logp;
                }
                *p = logp.exp();
            }
        }
        let loss = loss / T::of(n as f64);
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::SoftmaxCe(logits, targets.to_vec(), probs), ng)
    }

    /// Squared error between `a` and `b`, averaged over cells when `mean`.
    pub fn mse(&mut self, a: Var, b: Var, mean: bool) -> Result<Var> {
        self.binary_same("mse", a, b)?;
        let total = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let n = self.value(a).len();
        let loss = if mean { total / T::of(n.max(1) as f64) } else { total };
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(loss), Op::Mse(a, b, mean), ng)
    }

    /// `(1/m) * sum_i ||f_i - c_{y_i}||^2` over rows with `Some` label, where
    /// `m` counts those rows. `centers` is `k x d` and is not differentiated.
    pub fn center_loss(&mut self, features: Var, labels: &[Option<usize>], centers: &Tensor<T>) -> Result<Var> {
        let s = self.shape(features).to_vec();
        let cs = centers.shape();
        if s.len() != 2 || s[0] != labels.len() || cs.len() != 2 || cs[1] != s[1] {
            return Err(shape("center_loss", format!("features {:?}, centers {:?}, {} labels", s, cs, labels.len())));
        }
        let d = s[1];
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= cs[0]) {
            return Err(validation(format!("center-loss label {} out of range (k = {})", bad, cs[0])));
        }
        let m = labels.iter().filter(|l| l.is_some()).count();
        let f = self.data(features);
        let mut total = T::zero();
        for (i, y) in labels.iter().enumerate() {
            if let Some(y) = *y {
                let c = &centers.data()[y * d..(y + 1) * d];
                for (&fv, &cv) in f[i * d..(i + 1) * d].iter().zip(c) {
                    total += (fv - cv) * (fv - cv);
                }
            }
        }
        let loss = if m == 0 { T::zero() } else { total / T::of(m as f64) };
        let ng = self.ng(features);
        self.push(
            Tensor::scalar(loss),
            Op::CenterLoss(features, labels.to_vec(), centers.data().to_vec(), m),
            ng,
        )
    }

    /// Reverse sweep from a scalar `root`. Gradients of shared nodes
    /// accumulate over all paths.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    /// Parameter leaves recorded on this tape and their node handles.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bd = self.data(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    T::gemm(false, true, m, k, n, T::one(), g, bd, T::one(), ga);
                }
                let ad = self.data(*a);
                if let Some(gb) = self.slot(grads, *b) {
                    T::gemm(true, false, k, n, m, T::one(), ad, g, T::one(), gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..bt {
                        T::gemm(false, true, m, k, n, T::one(), &g[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], T::one(), &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..bt {
                        T::gemm(true, false, k, n, m, T::one(), &ad[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], T::one(), &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                let n = self.shape(*b)[0];
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(ad) {
                        if x > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += s * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += s * (T::one() - y * y);
                    }
                }
            }
            Op::Softmax(a) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((dr, gr), yr) in ga.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&s, &y)| acc + s * y);
                        for ((d, &s), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (s - dot);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Permute(a, perm) => {
                let (_, map) = permute_index_map(self.shape(*a), perm);
                if let Some(ga) = self.slot(grads, *a) {
                    for (&src, &s) in map.iter().zip(g) {
                        ga[src] += s;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let width = node.value.shape()[*axis] * inner;
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        ga[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            ga[base..base + inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::Conv2d(x, w, b, geom) => self.conv2d_backward(node, g, grads, *x, *w, *b, *geom),
            Op::ConvTranspose2d(x, w, b, geom) => self.conv_t_backward(node, g, grads, *x, *w, *b, *geom),
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::SoftmaxCe(logits, targets, probs) => {
                let n = self.shape(*logits)[0];
                let scale = g[0] / T::of(n as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((d, &p), &t) in gl.iter_mut().zip(probs).zip(targets) {
                        *d += scale * (p - t);
                    }
                }
            }
            Op::Mse(a, b, mean) => {
                let n = self.value(*a).len();
                let c = if *mean { T::of(2.0) / T::of(n.max(1) as f64) } else { T::of(2.0) } * g[0];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(ad).zip(bd) {
                        *d += c * (x - y);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(ad).zip(bd) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::CenterLoss(f, labels, centers, m) => {
                if *m == 0 {
                    return;
                }
                let d = self.shape(*f)[1];
                let c = T::of(2.0) / T::of(*m as f64) * g[0];
                let fd = self.data(*f);
                if let Some(gf) = self.slot(grads, *f) {
                    for (i, y) in labels.iter().enumerate() {
                        if let Some(y) = *y {
                            for j in 0..d {
                                gf[i * d + j] += c * (fd[i * d + j] - centers[y * d + j]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], x: Var, w: Var, b: Option<Var>, geom: Geom) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (n, c, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
        let ckk = c * geom.kh * geom.kw;
        let plane = ho * wo;
        if let Some(b) = b {
            if let Some(gb) = self.slot(grads, b) {
                accumulate_channel_bias(gb, g, o, plane);
            }
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut cols = vec![T::zero(); ckk * plane];
        if self.ng(w) {
            let gw = grads[w.0].get_or_insert_with(|| vec![T::zero(); o * ckk]);
            for i in 0..n {
                im2col(&xd[i * c * h * wi..(i + 1) * c * h * wi], c, h, wi, geom, ho, wo, &mut cols);
                T::gemm(false, true, o, ckk, plane, T::one(), &g[i * o * plane..(i + 1) * o * plane], &cols, T::one(), gw);
            }
        }
        if let Some(gx) = self.slot(grads, x) {
            for i in 0..n {
                T::gemm(true, false, ckk, plane, o, T::one(), wd, &g[i * o * plane..(i + 1) * o * plane], T::zero(), &mut cols);
                col2im(&cols, c, h, wi, geom, ho, wo, &mut gx[i * c * h * wi..(i + 1) * c * h * wi]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t_backward(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], x: Var, w: Var, b: Option<Var>, geom: Geom) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (n, ci, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[1];
        let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
        let ckk = co * geom.kh * geom.kw;
        let (plane_in, plane_out) = (h * wi, ho * wo);
        if let Some(b) = b {
            if let Some(gb) = self.slot(grads, b) {
                accumulate_channel_bias(gb, g, co, plane_out);
            }
        }
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        if !need_w && !need_x {
            return;
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut cols = vec![T::zero(); ckk * plane_in];
        for i in 0..n {
            im2col(&g[i * co * plane_out..(i + 1) * co * plane_out], co, ho, wo, geom, h, wi, &mut cols);
            if need_w {
                let gw = grads[w.0].get_or_insert_with(|| vec![T::zero(); ci * ckk]);
                T::gemm(false, true, ci, ckk, plane_in, T::one(), &xd[i * ci * plane_in..(i + 1) * ci * plane_in], &cols, T::one(), gw);
            }
            if need_x {
                let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); n * ci * plane_in]);
                T::gemm(false, false, ci, plane_in, ckk, T::one(), wd, &cols, T::one(), &mut gx[i * ci * plane_in..(i + 1) * ci * plane_in]);
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], channels: usize, plane: usize) {
    for (idx, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[idx % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias<T: Real>(gb: &mut [T], g: &[T], channels: usize, plane: usize) {
    for (idx, chunk) in g.chunks(plane).enumerate() {
        gb[idx % channels] += chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul(..) => "batch_matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias(..) => "add_bias",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Softmax(_) => "softmax",
        Op::Reshape(_) => "reshape",
        Op::Permute(..) => "permute",
        Op::Concat(..) => "concat",
        Op::Slice(..) => "slice",
        Op::Sum(_) => "sum",
        Op::SumAxis(..) => "sum_axis",
        Op::Conv2d(..) => "conv2d",
        Op::ConvTranspose2d(..) => "conv_transpose2d",
        Op::Dropout(..) => "dropout",
        Op::SoftmaxCe(..) => "softmax_cross_entropy",
        Op::Mse(..) => "mse",
        Op::CenterLoss(..) => "center_loss",
    }
}
