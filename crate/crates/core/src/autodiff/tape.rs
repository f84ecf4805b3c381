//! Reverse-mode tape.
//!
//! Every op evaluates eagerly, appends one node holding its output value, and
//! remembers what its backward rule needs. Nodes are pushed in evaluation
//! order, so the node list is already topologically sorted and `backward`
//! is a single reverse sweep.
//!
//! Reductions over sequence positions (`bmm`, `softmax_rows`) sum their terms
//! in sorted order. The result then depends only on the multiset of terms,
//! so permuting the tokens of a sequence permutes the outputs bit-exactly.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    Linear { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Bmm { a: Var, b: Var },
    TransposeLast2 { x: Var },
    SwapAxes01 { x: Var },
    Reshape { x: Var },
    Softmax { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    UpConv { x: Var, w: Var, b: Var, factor: usize },
    Dropout { x: Var, mask: Vec<f64> },
    MaskedSse { pred: Var, target: Vec<f64>, mask: Vec<f64> },
    Sum { x: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Linear { x, w } => vec![*x, *w],
            AddBias { x, b } => vec![*x, *b],
            Add { a, b } | AddBroadcast { a, b } | Mul { a, b } | Bmm { a, b } => vec![*a, *b],
            UpConv { x, w, b, .. } => vec![*x, *w, *b],
            Concat { xs, .. } => xs.clone(),
            Scale { x, .. }
            | Relu { x }
            | TransposeLast2 { x }
            | SwapAxes01 { x }
            | Reshape { x }
            | Softmax { x }
            | Narrow { x, .. }
            | MaxPool { x, .. }
            | Dropout { x, .. }
            | Sum { x } => vec![*x],
            MaskedSse { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `[outer, axis, inner]` decomposition of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Leaves that require a gradient but were not reached get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        match self.grads.get(v.0) {
            Some(Some(g)) => Some(g.clone()),
            _ => Some(Tensor::zeros(node.value.shape())),
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        self.linear(a, b)
    }

    /// `x[..., k] · w[k, n] -> [..., n]`, the same dense map at every leading index.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let k = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::shape(format!("linear map of {sx:?} by {sw:?}")));
        }
        let n = sw[1];
        let rows = xv.numel() / k;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = &xd[r * k..(r + 1) * k];
            let orow = &mut out[r * n..(r + 1) * n];
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wd[i * n..(i + 1) * n];
                for (o, &wij) in orow.iter_mut().zip(wrow) {
                    *o += xi * wij;
                }
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Linear { x, w }))
    }

    /// Adds `b[n]` along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().unwrap();
        if bv.rank() != 1 || bv.numel() != n {
            return Err(Error::shape(format!("bias {:?} for {:?}", bv.shape(), xv.shape())));
        }
        let bd = bv.data();
        let data = xv.data().chunks(n).flat_map(|row| row.iter().zip(bd).map(|(a, b)| a + b)).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddBias { x, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Offsets into `b` for each element of `a`, where `b` has `a`'s rank and
    /// every dimension either matches or is 1.
    fn broadcast_offsets(sa: &[usize], sb: &[usize]) -> Vec<usize> {
        let rank = sa.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            strides[i] = if sb[i] == 1 { 0 } else { acc };
            acc *= sb[i];
        }
        let total: usize = sa.iter().product();
        let mut idx = vec![0usize; rank];
        let mut offsets = Vec::with_capacity(total);
        let mut off = 0usize;
        for _ in 0..total {
            offsets.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < sa[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        offsets
    }

    /// `a + b` where `b` has `a`'s rank with some dimensions collapsed to 1.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(&x, &y)| y != 1 && y != x) {
            return Err(Error::shape(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let offsets = Self::broadcast_offsets(&sa, &sb);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data = ad.iter().zip(&offsets).map(|(x, &o)| x + bd[o]).collect();
        let value = Tensor::new(&sa, data)?;
        Ok(self.push(value, Op::AddBroadcast { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { x })
    }

    /// 1×1 convolution over the channel axis, optionally followed by ReLU.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var, activation: bool) -> Result<Var> {
        let c_in = *self.shape(x).last().unwrap();
        let sw = self.shape(w);
        if sw.len() != 2 || sw[0] != c_in {
            return Err(Error::shape(format!(
                "pointwise conv with {c_in} input channels and weights {sw:?}"
            )));
        }
        let y = self.linear(x, w)?;
        let y = self.add_bias(y, b)?;
        Ok(if activation { self.relu(y) } else { y })
    }

    /// Batched product `[B, m, k] × [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("batched matmul of {sa:?} and {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bs * m * n];
        let mut terms = vec![0.0; k];
        for bi in 0..bs {
            let ab = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = &bd[bi * k * n..(bi + 1) * k * n];
            for i in 0..m {
                for j in 0..n {
                    for (kk, t) in terms.iter_mut().enumerate() {
                        *t = ab[i * k + kk] * bb[kk * n + j];
                    }
                    out[(bi * m + i) * n + j] = canonical_sum(&mut terms);
                }
            }
        }
        let value = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b }))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("transpose expects rank 3, got {s:?}")));
        }
        let value = Tensor::new(&[s[0], s[2], s[1]], permute_021(self.value(x).data(), s[0], s[1], s[2]))?;
        Ok(self.push(value, Op::TransposeLast2 { x }))
    }

    /// `[A, B, rest...] -> [B, A, rest...]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("axis swap needs rank >= 2, got {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let data = swap01(self.value(x).data(), s[0], s[1], inner);
        let mut shape = s.clone();
        shape.swap(0, 1);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SwapAxes01 { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut data = Vec::with_capacity(xv.numel());
        let mut exps = vec![0.0; n];
        for row in xv.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (e, &v) in exps.iter_mut().zip(row) {
                *e = (v - max).exp();
            }
            let mut sorted = exps.clone();
            let total = canonical_sum(&mut sorted);
            data.extend(exps.iter().map(|e| e / total));
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!("narrow [{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, extent, inner) = split_at_axis(&s, axis);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let agrees = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::shape(format!("concat of {first:?} and {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let extent = self.shape(v)[axis];
                let chunk = extent * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Max over windows of `p` consecutive positions on the second-to-last axis.
    pub fn maxpool1d(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("maxpool expects [.., L, d], got {s:?}")));
        }
        let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
        if p == 0 || l % p != 0 {
            return Err(Error::config(format!("sequence length {l} is not divisible by pooling factor {p}")));
        }
        let outer: usize = s[..s.len() - 2].iter().product();
        let lo = l / p;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * lo * d);
        let mut argmax = Vec::with_capacity(outer * lo * d);
        for o in 0..outer {
            for j in 0..lo {
                for c in 0..d {
                    let mut best = (o * l + j * p) * d + c;
                    for i in 1..p {
                        let idx = (o * l + j * p + i) * d + c;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    data.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = lo;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Non-overlapping transposed convolution (kernel = stride = `factor`):
    /// `x[.., L, d_in]`, `w[factor, d_in, d_out]`, `b[d_out]` -> `[.., L·factor, d_out]`.
    pub fn upconv1d(&mut self, x: Var, factor: usize, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 {
            return Err(Error::shape(format!("up-convolution expects [.., L, d], got {sx:?}")));
        }
        let (l, din) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        if factor == 0 || sw.len() != 3 || sw[0] != factor || sw[1] != din || sb != [sw[2]] {
            return Err(Error::shape(format!(
                "up-convolution by {factor} of {sx:?} with kernel {sw:?} and bias {sb:?}"
            )));
        }
        let dout = sw[2];
        let outer: usize = sx[..sx.len() - 2].iter().product();
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(outer * l * factor * dout);
        for o in 0..outer {
            for t in 0..l {
                let xrow = &xd[(o * l + t) * din..(o * l + t + 1) * din];
                for j in 0..factor {
                    let start = out.len();
                    out.extend_from_slice(bd);
                    let orow = &mut out[start..start + dout];
                    for (i, &xi) in xrow.iter().enumerate() {
                        let wrow = &wd[(j * din + i) * dout..(j * din + i + 1) * dout];
                        for (y, &wv) in orow.iter_mut().zip(wrow) {
                            *y += xi * wv;
                        }
                    }
                }
            }
        }
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = l * factor;
        shape[r - 1] = dout;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::UpConv { x, w, b, factor }))
    }

    /// Inverted dropout. Identity (same handle) when `rate == 0` or not training.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 || !training {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel()).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Sum of squared errors over positions where `mask` is set.
    pub fn masked_sse(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || mask.len() != pv.numel() {
            return Err(Error::shape(format!(
                "loss over prediction {:?}, target {:?}, mask of {}",
                pv.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let maskf: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let sse = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((p, t), _)| (p - t) * (p - t))
            .sum();
        let op = Op::MaskedSse { pred, target: target.data().to_vec(), mask: maskf };
        Ok(self.push(Tensor::scalar(sse), op))
    }

    /// Mean squared error over valid positions.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Loss("no valid positions to score".into()));
        }
        let sse = self.masked_sse(pred, target, mask)?;
        Ok(self.scale(sse, 1.0 / count as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Populates gradients of `loss` for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(())
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| nodes[v.0].value.data();
        let shp = |v: &Var| nodes[v.0].value.shape();
        let mut accum = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                let (xd, wd) = (val(x), val(w));
                let (k, n) = (shp(w)[0], shp(w)[1]);
                let rows = xd.len() / k;
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * k];
                    for r in 0..rows {
                        let g = &gy[r * n..(r + 1) * n];
                        for i in 0..k {
                            let wrow = &wd[i * n..(i + 1) * n];
                            dx[r * k + i] = g.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    accum(*x, dx);
                }
                if nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; k * n];
                    for r in 0..rows {
                        let g = &gy[r * n..(r + 1) * n];
                        for i in 0..k {
                            let xi = xd[r * k + i];
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dw[i * n..(i + 1) * n].iter_mut().zip(g) {
                                *d += xi * gv;
                            }
                        }
                    }
                    accum(*w, dw);
                }
            }
            Op::AddBias { x, b } => {
                let n = shp(b)[0];
                let mut db = vec![0.0; n];
                for row in gy.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                accum(*x, gy.to_vec());
                accum(*b, db);
            }
            Op::Add { a, b } => {
                accum(*a, gy.to_vec());
                accum(*b, gy.to_vec());
            }
            Op::AddBroadcast { a, b } => {
                let offsets = Self::broadcast_offsets(shp(a), shp(b));
                let mut db = vec![0.0; val(b).len()];
                for (g, &o) in gy.iter().zip(&offsets) {
                    db[o] += g;
                }
                accum(*a, gy.to_vec());
                accum(*b, db);
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                accum(*a, gy.iter().zip(bd).map(|(g, y)| g * y).collect());
                accum(*b, gy.iter().zip(ad).map(|(g, x)| g * x).collect());
            }
            Op::Scale { x, c } => accum(*x, gy.iter().map(|g| g * c).collect()),
            Op::Relu { x } => {
                accum(*x, gy.iter().zip(val(x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (shp(a), shp(b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (val(a), val(b));
                if nodes[a.0].requires_grad {
                    let mut da = vec![0.0; bs * m * k];
                    for bi in 0..bs {
                        for i in 0..m {
                            let g = &gy[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for kk in 0..k {
                                let brow = &bd[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                                da[(bi * m + i) * k + kk] = g.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    accum(*a, da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![0.0; bs * k * n];
                    for bi in 0..bs {
                        for i in 0..m {
                            let g = &gy[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for kk in 0..k {
                                let av = ad[(bi * m + i) * k + kk];
                                let drow = &mut db[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                                drow.iter_mut().zip(g).for_each(|(d, gv)| *d += av * gv);
                            }
                        }
                    }
                    accum(*b, db);
                }
            }
            Op::TransposeLast2 { x } => {
                let s = shp(x);
                // Output is [B, n, m]; undo with the same permutation.
                accum(*x, permute_021(gy, s[0], s[2], s[1]));
            }
            Op::SwapAxes01 { x } => {
                let s = shp(x);
                let inner: usize = s[2..].iter().product();
                accum(*x, swap01(gy, s[1], s[0], inner));
            }
            Op::Reshape { x } => accum(*x, gy.to_vec()),
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = *shp(x).last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gy.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                accum(*x, dx);
            }
            Op::Narrow { x, axis, start } => {
                let s = shp(x);
                let (outer, extent, inner) = split_at_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; val(x).len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                accum(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let extent = shp(v)[*axis];
                    let chunk = extent * inner;
                    let mut dx = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        dx.extend_from_slice(&gy[src..src + chunk]);
                    }
                    accum(*v, dx);
                    offset += extent;
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(x).len()];
                for (g, &src) in gy.iter().zip(argmax) {
                    dx[src] += g;
                }
                accum(*x, dx);
            }
            Op::UpConv { x, w, b, factor } => {
                let (sx, sw) = (shp(x), shp(w));
                let (l, din, dout) = (sx[sx.len() - 2], sw[1], sw[2]);
                let outer: usize = sx[..sx.len() - 2].iter().product();
                let (xd, wd) = (val(x), val(w));
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; dout];
                for o in 0..outer {
                    for t in 0..l {
                        let xbase = (o * l + t) * din;
                        for j in 0..*factor {
                            let g = &gy[((o * l + t) * factor + j) * dout..((o * l + t) * factor + j + 1) * dout];
                            db.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                            for i in 0..din {
                                let widx = (j * din + i) * dout;
                                let wrow = &wd[widx..widx + dout];
                                dx[xbase + i] += g.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                let xi = xd[xbase + i];
                                dw[widx..widx + dout].iter_mut().zip(g).for_each(|(d, gv)| *d += xi * gv);
                            }
                        }
                    }
                }
                accum(*x, dx);
                accum(*w, dw);
                accum(*b, db);
            }
            Op::Dropout { x, mask } => accum(*x, gy.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::MaskedSse { pred, target, mask } => {
                let g = gy[0];
                let pd = val(pred);
                accum(
                    *pred,
                    pd.iter().zip(target).zip(mask).map(|((p, t), m)| 2.0 * g * m * (p - t)).collect(),
                );
            }
            Op::Sum { x } => accum(*x, vec![gy[0]; val(x).len()]),
        }
    }
}

fn permute_021(data: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[(bi * n + j) * m + i] = data[(bi * m + i) * n + j];
            }
        }
    }
    out
}

fn swap01(data: &[f64], a: usize, b: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}
