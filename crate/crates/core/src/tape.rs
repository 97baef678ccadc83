//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with its output value. [`Tape::backward`] then walks the records in reverse,
//! accumulating adjoints, and writes `d loss / d param` into every
//! [`Parameter`] of a [`ParamStore`]. Parameters that never entered the trace
//! end up with an all-zero gradient.
//!
//! Only the handful of primitives the networks in this crate need are
//! provided: same-padded 2-D convolution, dense layers, ReLU, 2x2 average
//! pooling, element-wise add, scaling by a traced scalar, global average
//! pooling, masked softmax over a short vector, indexing, summation and mean
//! softmax cross-entropy.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns trainable tensors. Ids are never reused, so removing a parameter
/// leaves every other id valid.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<ParamId, Parameter>,
    next: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        self.insert(id, name.into(), value);
        id
    }

    /// Inserts a parameter under an explicit id (used when restoring checkpoints).
    pub fn insert(&mut self, id: ParamId, name: String, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(id, Parameter { id, name, value, grad });
        self.next = self.next.max(id.0 + 1);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Parameter> {
        self.params.remove(&id)
    }

    pub fn get(&self, id: ParamId) -> Option<&Parameter> {
        self.params.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Parameter> {
        self.params.get_mut(&id)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[&id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params.get_mut(&id).expect("unknown parameter").value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[&id].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Next id that `add` would hand out.
    pub fn next_id(&self) -> usize {
        self.next
    }

    pub(crate) fn set_next_id(&mut self, next: usize) {
        self.next = self.next.max(next);
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalars held by `ids`.
    pub fn scalar_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id].value.len()).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Conv2d { x: usize, w: usize, b: usize, stride: usize },
    Dense { x: usize, w: usize, b: usize },
    Relu(usize),
    AvgPool2x2(usize),
    Add(usize, usize),
    Scale { x: usize, s: usize },
    GlobalAvgPool(usize),
    Reshape(usize),
    Softmax { x: usize, mask: Vec<bool> },
    Index { x: usize, at: usize },
    Sum(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Record {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    id: u64,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn checked(op: &'static str, t: Tensor) -> Result<Tensor, TensorError> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.records.push(Record { op, value });
        Var { tape: self.id, index: self.records.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.records.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.records[v.index].value
    }

    /// Records the current value of a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        let p = store.get(id).ok_or(TensorError::UnknownParam(id.0))?;
        Ok(self.push(Op::Leaf(Some(id)), p.value.clone()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf(None), value)
    }

    /// Same-padded 2-D convolution. `x` is `(N, C, H, W)`, `w` is `(O, C, K, K)`
    /// with odd `K`, `b` is `(O)`. Output is `(N, O, H / stride, W / stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = {
            let (xv, wv, bv) = (&self.records[xi].value, &self.records[wi].value, &self.records[bi].value);
            let geom = ConvGeom::new(xv.shape(), wv.shape(), bv.shape(), stride)?;
            checked("conv2d", conv2d_forward(&geom, xv.data(), wv.data(), bv.data()))?
        };
        Ok(self.push(Op::Conv2d { x: xi, w: wi, b: bi, stride }, out))
    }

    /// `x (N, F) · wᵀ + b` with `w` shaped `(O, F)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = {
            let (xv, wv, bv) = (&self.records[xi].value, &self.records[wi].value, &self.records[bi].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bv.len() != ws[0] {
                return Err(shape_err("dense", format!("x {xs:?}, w {ws:?}, b {:?}", bv.shape())));
            }
            let (n, f, o) = (xs[0], xs[1], ws[0]);
            let mut out = vec![0.0; n * o];
            for r in 0..n {
                let xrow = &xv.data()[r * f..(r + 1) * f];
                for c in 0..o {
                    let wrow = &wv.data()[c * f..(c + 1) * f];
                    let mut acc = bv.data()[c];
                    for k in 0..f {
                        acc += wrow[k] * xrow[k];
                    }
                    out[r * o + c] = acc;
                }
            }
            checked("dense", Tensor::new(vec![n, o], out)?)?
        };
        Ok(self.push(Op::Dense { x: xi, w: wi, b: bi }, out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let v = &self.records[xi].value;
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu(xi), out))
    }

    /// Non-overlapping 2x2 mean pooling; odd trailing rows/columns are dropped.
    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let v = &self.records[xi].value;
        let s = v.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("avgpool2x2", format!("input {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let d = v.data();
        for plane in 0..n * c {
            let src = &d[plane * h * w..];
            let dst = &mut out[plane * oh * ow..];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::AvgPool2x2(xi), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = {
            let (av, bv) = (&self.records[ai].value, &self.records[bi].value);
            if av.shape() != bv.shape() {
                return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
            }
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            checked("add", Tensor::new(av.shape().to_vec(), data)?)?
        };
        Ok(self.push(Op::Add(ai, bi), out))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let out = {
            let (xv, sv) = (&self.records[xi].value, &self.records[si].value);
            if !sv.is_scalar() {
                return Err(shape_err("scale", format!("scalar expected, got {:?}", sv.shape())));
            }
            let k = sv.item();
            let data = xv.data().iter().map(|a| k * a).collect();
            checked("scale", Tensor::new(xv.shape().to_vec(), data)?)?
        };
        Ok(self.push(Op::Scale { x: xi, s: si }, out))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let v = &self.records[xi].value;
        let s = v.shape();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = 1.0 / hw as f64;
        let data = v.data().chunks(hw).map(|p| p.iter().sum::<f64>() * inv).collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(Op::GlobalAvgPool(xi), out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let out = self.records[xi].value.clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(xi), out))
    }

    /// Softmax over the entries of a vector where `mask` is true. Masked-out
    /// entries produce exactly zero and receive no gradient.
    pub fn softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let v = &self.records[xi].value;
        if v.len() != mask.len() || !mask.iter().any(|&m| m) {
            return Err(shape_err("softmax", format!("len {} with mask {mask:?}", v.len())));
        }
        let out = Tensor::new(v.shape().to_vec(), masked_softmax(v.data(), mask))?;
        Ok(self.push(Op::Softmax { x: xi, mask: mask.to_vec() }, out))
    }

    /// Single element `x[at]` as a one-element tensor.
    pub fn index(&mut self, x: Var, at: usize) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let v = &self.records[xi].value;
        if at >= v.len() {
            return Err(shape_err("index", format!("{at} out of range for {:?}", v.shape())));
        }
        let out = Tensor::scalar(v.data()[at]);
        Ok(self.push(Op::Index { x: xi, at }, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let out = checked("sum", Tensor::scalar(self.records[xi].value.sum()))?;
        Ok(self.push(Op::Sum(xi), out))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let li = self.idx(logits)?;
        let v = &self.records[li].value;
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(shape_err("softmax_cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let (n, k) = (s[0], s[1]);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &v.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &a) in row.iter().enumerate() {
                let e = (a - max).exp();
                probs[r * k + j] = e;
                z += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            loss += z.ln() - (row[labels[r]] - max);
        }
        let out = checked("softmax_cross_entropy", Tensor::scalar(loss / n as f64))?;
        let probs = Tensor::new(vec![n, k], probs)?;
        Ok(self.push(Op::SoftmaxCrossEntropy { logits: li, labels: labels.to_vec(), probs }, out))
    }

    /// Replays adjoints in reverse order and stores `d loss / d p` in every
    /// parameter of `store`. Grads are zeroed first; parameters that appear
    /// several times on the tape accumulate.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let li = self.idx(loss)?;
        if !self.records[li].value.is_scalar() {
            return Err(TensorError::NotScalar(self.records[li].value.shape().to_vec()));
        }
        store.zero_grads();
        let mut adj: Vec<Option<Tensor>> = vec![None; li + 1];
        adj[li] = Some(Tensor::full(self.records[li].value.shape(), 1.0));

        for i in (0..=li).rev() {
            let Some(g) = adj[i].take() else { continue };
            let rec = &self.records[i];
            match &rec.op {
                Op::Leaf(Some(id)) => {
                    let p = store.get_mut(*id).ok_or(TensorError::UnknownParam(id.0))?;
                    p.grad.add_assign(&g);
                }
                Op::Leaf(None) => {}
                Op::Conv2d { x, w, b, stride } => {
                    let (xv, wv, bv) = (&self.records[*x].value, &self.records[*w].value, &self.records[*b].value);
                    let geom = ConvGeom::new(xv.shape(), wv.shape(), bv.shape(), *stride)?;
                    let (gx, gw, gb) = conv2d_backward(&geom, xv.data(), wv.data(), g.data());
                    accumulate(&mut adj, *x, xv.shape(), gx);
                    accumulate(&mut adj, *w, wv.shape(), gw);
                    accumulate(&mut adj, *b, bv.shape(), gb);
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (&self.records[*x].value, &self.records[*w].value);
                    let (n, f, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                    let mut gx = vec![0.0; n * f];
                    let mut gw = vec![0.0; o * f];
                    let mut gb = vec![0.0; o];
                    for r in 0..n {
                        for c in 0..o {
                            let gy = gd[r * o + c];
                            gb[c] += gy;
                            for k in 0..f {
                                gx[r * f + k] += gy * wd[c * f + k];
                                gw[c * f + k] += gy * xd[r * f + k];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, xv.shape(), gx);
                    accumulate(&mut adj, *w, wv.shape(), gw);
                    let bshape = self.records[*b].value.shape().to_vec();
                    accumulate(&mut adj, *b, &bshape, gb);
                }
                Op::Relu(x) => {
                    // adjoint is 0 wherever the output is 0, including x == 0
                    let gx = g.data().iter().zip(rec.value.data()).map(|(&gy, &y)| if y > 0.0 { gy } else { 0.0 }).collect();
                    accumulate(&mut adj, *x, rec.value.shape(), gx);
                }
                Op::AvgPool2x2(x) => {
                    let s = self.records[*x].value.shape().to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let gsrc = &g.data()[plane * oh * ow..];
                        let dst = &mut gx[plane * h * w..];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let q = 0.25 * gsrc[y * ow + xx];
                                let i = 2 * y * w + 2 * xx;
                                dst[i] += q;
                                dst[i + 1] += q;
                                dst[i + w] += q;
                                dst[i + w + 1] += q;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, &s, gx);
                }
                Op::Add(a, b) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut adj, *a, &shape, g.data().to_vec());
                    accumulate(&mut adj, *b, &shape, g.into_data());
                }
                Op::Scale { x, s } => {
                    let xv = &self.records[*x].value;
                    let k = self.records[*s].value.item();
                    let gs: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    let gx = g.data().iter().map(|a| a * k).collect();
                    accumulate(&mut adj, *x, xv.shape(), gx);
                    let sshape = self.records[*s].value.shape().to_vec();
                    accumulate(&mut adj, *s, &sshape, vec![gs]);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.records[*x].value.shape().to_vec();
                    let hw = s[2] * s[3];
                    let inv = 1.0 / hw as f64;
                    let mut gx = Vec::with_capacity(s.iter().product());
                    for &gy in g.data() {
                        gx.extend(std::iter::repeat_n(gy * inv, hw));
                    }
                    accumulate(&mut adj, *x, &s, gx);
                }
                Op::Reshape(x) => {
                    let s = self.records[*x].value.shape().to_vec();
                    accumulate(&mut adj, *x, &s, g.into_data());
                }
                Op::Softmax { x, mask } => {
                    let y = rec.value.data();
                    let dot: f64 = y.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let gx = (0..y.len()).map(|j| if mask[j] { y[j] * (g.data()[j] - dot) } else { 0.0 }).collect();
                    accumulate(&mut adj, *x, rec.value.shape(), gx);
                }
                Op::Index { x, at } => {
                    let s = self.records[*x].value.shape().to_vec();
                    let mut gx = vec![0.0; s.iter().product()];
                    gx[*at] = g.item();
                    accumulate(&mut adj, *x, &s, gx);
                }
                Op::Sum(x) => {
                    let s = self.records[*x].value.shape().to_vec();
                    let n = s.iter().product();
                    accumulate(&mut adj, *x, &s, vec![g.item(); n]);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let k = probs.shape()[1];
                    let scale = g.item() / labels.len() as f64;
                    let mut gx = probs.data().to_vec();
                    for (r, &l) in labels.iter().enumerate() {
                        gx[r * k + l] -= 1.0;
                    }
                    gx.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut adj, *logits, probs.shape(), gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], at: usize, shape: &[usize], grad: Vec<f64>) {
    match &mut adj[at] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&grad) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), grad).expect("adjoint shape")),
    }
}

pub(crate) fn masked_softmax(x: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = x.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().zip(mask).map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 }).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize) -> Result<Self, TensorError> {
        let bad = || shape_err("conv2d", format!("x {x:?}, w {w:?}, b {b:?}, stride {stride}"));
        if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || w[2].is_multiple_of(2) || b != [w[0]] || stride == 0 {
            return Err(bad());
        }
        let (oh, ow) = (x[2] / stride, x[3] / stride);
        if oh == 0 || ow == 0 {
            return Err(bad());
        }
        Ok(Self { n: x[0], c: x[1], h: x[2], w: x[3], o: w[0], k: w[2], stride, pad: w[2] / 2, oh, ow })
    }

    /// Output index range `[lo, hi)` along one axis whose input coordinate
    /// `o * stride + tap - pad` falls inside `[0, len)`.
    fn valid(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad { 0 } else { (self.pad - tap).div_ceil(s) };
        let hi = (len + self.pad - tap).div_ceil(s).min(out_len);
        (lo, hi.max(lo))
    }
}

fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Tensor {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let plane = g.oh * g.ow;
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            dst.fill(b[o]);
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.k {
                        let wv = w[((o * g.c + c) * g.k + ky) * g.k + kx];
                        let (xlo, xhi) = g.valid(kx, g.w, g.ow);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let off = kx as isize - g.pad as isize;
                                let (d, s) = (&mut drow[xlo..xhi], &row[(xlo as isize + off) as usize..(xhi as isize + off) as usize]);
                                for (dv, sv) in d.iter_mut().zip(s) {
                                    *dv += wv * sv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out).expect("conv output shape")
}

fn conv2d_backward(g: &ConvGeom, x: &[f64], w: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.o];
    let plane = g.oh * g.ow;
    let hw = g.h * g.w;
    for n in 0..g.n {
        for o in 0..g.o {
            let gsrc = &gy[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            gb[o] += gsrc.iter().sum::<f64>();
            for c in 0..g.c {
                let xs = &x[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
                let gxs = &mut gx[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
                for ky in 0..g.k {
                    let (ylo, yhi) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.k {
                        let wi = ((o * g.c + c) * g.k + ky) * g.k + kx;
                        let wv = w[wi];
                        let (xlo, xhi) = g.valid(kx, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gsrc[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let lo = xlo + kx - g.pad;
                                let hi = xhi + kx - g.pad;
                                let xrow = &xs[iy * g.w + lo..iy * g.w + hi];
                                let gxrow = &mut gxs[iy * g.w + lo..iy * g.w + hi];
                                let gr = &grow[xlo..xhi];
                                for ((gxv, xv), gv) in gxrow.iter_mut().zip(xrow).zip(gr) {
                                    acc += gv * xv;
                                    *gxv += gv * wv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate().take(xhi).skip(xlo) {
                                    let ix = iy * g.w + ox * g.stride + kx - g.pad;
                                    acc += gv * xs[ix];
                                    gxs[ix] += gv * wv;
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values.iter().map(|(n, v)| store.add(*n, v.clone())).collect();
        (store, ids)
    }

    #[test]
    fn relu_forward_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn add_forward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn unit_impulse_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let input: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], input.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), input.as_slice());
    }

    #[test]
    fn conv_stride_two_floors_spatial_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 2, 2]);
    }

    #[test]
    fn linear_gradient() {
        let (mut store, ids) = store_with(&[("w", Tensor::vector(vec![2.0]))]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]).unwrap();
        let x = tape.constant(Tensor::vector(vec![3.0]));
        let wx = tape.scale(x, w).unwrap();
        let loss = tape.sum(wx).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[3.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_on_negatives() {
        let (mut store, ids) = store_with(&[("w", Tensor::vector(vec![-1.0, 2.0]))]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]).unwrap();
        let r = tape.relu(w).unwrap();
        let loss = tape.sum(r).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_adjoint_at_zero_is_zero() {
        let (mut store, ids) = store_with(&[("w", Tensor::vector(vec![0.0]))]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]).unwrap();
        let r = tape.relu(w).unwrap();
        let loss = tape.sum(r).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[0.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let (mut store, ids) = store_with(&[("w", Tensor::vector(vec![2.0])), ("unused", Tensor::vector(vec![5.0, 1.0]))]);
        store.get_mut(ids[1]).unwrap().grad.fill(7.0);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]).unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(ids[1]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x, &mut store), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut store = ParamStore::new();
        let mut other = Tape::new();
        let x = other.constant(Tensor::scalar(1.0));
        let tape = Tape::new();
        assert!(matches!(tape.backward(x, &mut store), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::MAX]));
        let y = tape.add(x, x);
        assert!(matches!(y, Err(TensorError::NonFinite { op: "add" })));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let p = masked_softmax(&[0.0, 5.0, 1.0], &[true, false, true]);
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
    }
}
