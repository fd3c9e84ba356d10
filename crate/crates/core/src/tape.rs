//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because inputs always precede their consumers. Accumulation into an
//! input gradient happens in that fixed order, so gradients are bit-stable.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBroadcast { x: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
    Relu { x: NodeId },
    Gelu { x: NodeId, tanh: Vec<T> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { x: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    Reshape { x: NodeId },
    Upsample { x: NodeId, factor: usize },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
    Mse { pred: NodeId, target: Vec<T> },
    Sum { x: NodeId },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// GELU, tanh formulation.
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. a node, if that node needed one.
    pub fn get(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every registered parameter that requires one, in
    /// registration order. Parameters the loss never reached are all-zero.
    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor<T>> {
        self.params
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Input or constant leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Named parameter leaf; its gradient is reported by name.
    pub fn param(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = self.leaf(value, requires_grad);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        gemm(
            T::ONE,
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            T::ZERO,
            &mut out,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `x W + b` over the last axis of `x`, with `W` stored as `[in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let din = self.value(x).last_dim();
        if sw.len() != 2 || sw[0] != din || sb != [sw[1]] || sx.is_empty() {
            return Err(shape_err("linear", format!("x {sx:?}, W {sw:?}, b {sb:?}")));
        }
        let dout = sw[1];
        let rows = self.value(x).len() / din;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            T::ONE,
            MatRef::row_major(self.value(x).data(), rows, din),
            MatRef::row_major(self.value(w).data(), din, dout),
            T::ONE,
            &mut out,
            dout,
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (sx, sb) = (vx.shape(), vb.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb || vb.is_empty() {
            return Err(shape_err("add_broadcast", format!("{sx:?} + {sb:?}")));
        }
        let inner = vb.len();
        let bd = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + bd[i % inner]).collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBroadcast { x, b }, &[x, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (k, c, half) = (T::from_f64(GELU_K), T::from_f64(GELU_C), T::from_f64(0.5));
        let xv = self.value(x);
        let tanh: Vec<T> = xv.data().iter().map(|&v| (k * (v + c * v * v * v)).tanh()).collect();
        let data = xv.data().iter().zip(&tanh).map(|(&v, &t)| half * v * (T::ONE + t)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x, tanh }, &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        let (sg, sb) = (self.value(gamma).shape(), self.value(beta).shape());
        if sg != [d] || sb != [d] || !(eps > 0.0) {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {sg:?}, beta {sb:?}, eps {eps}", self.value(x).shape()),
            ));
        }
        let xs = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let dn = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            // Shifted by the first element: a constant row centres to exact zeros.
            let shift = row[0];
            let mut s = T::ZERO;
            for &v in row {
                s += v - shift;
            }
            let mean_shifted = s / dn;
            let mut var = T::ZERO;
            for &v in row {
                let c = (v - shift) - mean_shifted;
                var += c * c;
            }
            let istd = T::ONE / (var / dn + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = ((row[j] - shift) - mean_shifted) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Multi-head scaled dot-product attention over `[B, N, D]` inputs,
    /// heads interleaved along `D`.
    pub fn scaled_dot_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        let sq = self.value(q).shape().to_vec();
        if sq.len() != 3
            || self.value(k).shape() != sq.as_slice()
            || self.value(v).shape() != sq.as_slice()
            || heads == 0
            || !sq[2].is_multiple_of(heads)
        {
            return Err(shape_err(
                "scaled_dot_attention",
                format!(
                    "q {sq:?}, k {:?}, v {:?}, heads {heads}",
                    self.value(k).shape(),
                    self.value(v).shape()
                ),
            ));
        }
        let (b, n, d) = (sq[0], sq[1], sq[2]);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::ZERO; b * heads * n * n];
        let mut out = vec![T::ZERO; b * n * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * n * d + h * dh;
                let p = &mut probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                gemm(scale, head_view(qd, off, n, dh, d), head_view(kd, off, n, dh, d).t(), T::ZERO, p, n);
                for row in p.chunks_mut(n) {
                    softmax_in_place(row);
                }
                gemm(
                    T::ONE,
                    MatRef::row_major(p, n, n),
                    head_view(vd, off, n, dh, d),
                    T::ZERO,
                    &mut out[off..],
                    d,
                );
            }
        }
        let value = Tensor::new(sq, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Nearest-neighbour upsampling of `[B, h, w, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err("upsample_nearest", format!("{s:?} x{factor}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ((bi * h + y / factor) * w + xx / factor) * c;
                    out.extend_from_slice(&src[base..base + c]);
                }
            }
        }
        let value = Tensor::new(vec![b, oh, ow, c], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Mean softmax cross-entropy of `[..., K]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let kc = self.value(logits).last_dim();
        let rows = self.value(logits).len() / kc.max(1);
        if rows != labels.len() || rows == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?}, {} labels", self.value(logits).shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= kc) {
            return Err(Error::ClassOutOfRange { class: bad, num_classes: kc });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &label) in probs.chunks_mut(kc).zip(labels) {
            softmax_in_place(row);
            // Clamp guards ln(0) when a logit gap underflows.
            total -= row[label].to_f64().max(f64::MIN_POSITIVE).ln();
        }
        let value = Tensor::scalar(T::from_f64(total / rows as f64));
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Mean squared error against a constant target of equal length.
    pub fn mse(&mut self, pred: NodeId, target: &[T]) -> Result<NodeId> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(shape_err(
                "mse",
                format!("pred {:?}, target len {}", self.value(pred).shape(), target.len()),
            ));
        }
        let mut total = T::ZERO;
        for (&a, &b) in p.iter().zip(target) {
            total += (a - b) * (a - b);
        }
        let value = Tensor::scalar(total / T::from_f64(p.len() as f64));
        Ok(self.push(value, Op::Mse { pred, target: target.to_vec() }, &[pred]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut total = T::ZERO;
        for &v in self.value(x).data() {
            total += v;
        }
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Propagates `d loss / d node` to every node that needs a gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let l = lv.data()[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0, value: l.to_f64() as f32 });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut params = IndexMap::new();
        for (name, id) in &self.params {
            if !self.nodes[id.0].needs_grad {
                continue;
            }
            let shape = self.nodes[id.0].value.shape().to_vec();
            let g = match &grads[id.0] {
                Some(g) => Tensor::new(shape, g.clone())?,
                None => Tensor::zeros(&shape),
            };
            params.insert(name.clone(), g);
        }
        Ok(Gradients { grads, shapes, params })
    }

    fn backprop_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let dyv = MatRef::row_major(dy, m, n);
                if self.needs_grad(*a) {
                    let bv = MatRef::row_major(self.value(*b).data(), k, n);
                    let ga = self.grad_buf(grads, *a);
                    gemm(T::ONE, dyv, bv.t(), T::ONE, ga, k);
                }
                if self.needs_grad(*b) {
                    let av = MatRef::row_major(self.value(*a).data(), m, k);
                    let gb = self.grad_buf(grads, *b);
                    gemm(T::ONE, av.t(), dyv, T::ONE, gb, n);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.value(*w).shape();
                let (din, dout) = (sw[0], sw[1]);
                let rows = dy.len() / dout;
                let dyv = MatRef::row_major(dy, rows, dout);
                if self.needs_grad(*x) {
                    let wv = MatRef::row_major(self.value(*w).data(), din, dout);
                    let gx = self.grad_buf(grads, *x);
                    gemm(T::ONE, dyv, wv.t(), T::ONE, gx, din);
                }
                if self.needs_grad(*w) {
                    let xv = MatRef::row_major(self.value(*x).data(), rows, din);
                    let gw = self.grad_buf(grads, *w);
                    gemm(T::ONE, xv.t(), dyv, T::ONE, gw, dout);
                }
                if self.needs_grad(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for row in dy.chunks(dout) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.needs_grad(id) {
                        add_into(self.grad_buf(grads, id), dy);
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                if self.needs_grad(*x) {
                    add_into(self.grad_buf(grads, *x), dy);
                }
                if self.needs_grad(*b) {
                    let gb = self.grad_buf(grads, *b);
                    let inner = gb.len();
                    for chunk in dy.chunks(inner) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs_grad(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (g, &d) in gx.iter_mut().zip(dy) {
                        *g += d * *factor;
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs_grad(*x) {
                    let xs = self.value(*x).data();
                    let gx = self.grad_buf(grads, *x);
                    for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(xs) {
                        if v > T::ZERO {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                if self.needs_grad(*x) {
                    let (k, half) = (T::from_f64(GELU_K), T::from_f64(0.5));
                    let three_c = T::from_f64(3.0 * GELU_C);
                    let xs = self.value(*x).data();
                    let gx = self.grad_buf(grads, *x);
                    for (((g, &d), &v), &t) in gx.iter_mut().zip(dy).zip(xs).zip(tanh) {
                        let dt = (T::ONE - t * t) * k * (T::ONE + three_c * v * v);
                        *g += d * (half * (T::ONE + t) + half * v * dt);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).len();
                let g = self.value(*gamma).data();
                if self.needs_grad(*x) {
                    let dn = T::from_f64(d as f64);
                    let gx = self.grad_buf(grads, *x);
                    let mut dxhat = vec![T::ZERO; d];
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let (dyr, hr) = (&dy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let (mut s1, mut s2) = (T::ZERO, T::ZERO);
                        for j in 0..d {
                            dxhat[j] = dyr[j] * g[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            gx[r * d + j] += istd * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if self.needs_grad(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for (dyr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dyr[j] * hr[j];
                        }
                    }
                }
                if self.needs_grad(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for dyr in dy.chunks(d) {
                        add_into(gb, dyr);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs_grad(*x) {
                    let d = node.value.last_dim();
                    let ys = node.value.data();
                    let gx = self.grad_buf(grads, *x);
                    for ((gr, dyr), yr) in gx.chunks_mut(d).zip(dy.chunks(d)).zip(ys.chunks(d)) {
                        let mut dot = T::ZERO;
                        for j in 0..d {
                            dot += dyr[j] * yr[j];
                        }
                        for j in 0..d {
                            gr[j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, dy, grads);
            }
            Op::Reshape { x } => {
                if self.needs_grad(*x) {
                    add_into(self.grad_buf(grads, *x), dy);
                }
            }
            Op::Upsample { x, factor } => {
                if self.needs_grad(*x) {
                    let s = self.value(*x).shape();
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let gx = self.grad_buf(grads, *x);
                    let mut src = 0;
                    for bi in 0..b {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let base = ((bi * h + y / factor) * w + xx / factor) * c;
                                add_into(&mut gx[base..base + c], &dy[src..src + c]);
                                src += c;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs_grad(*logits) {
                    let kc = self.value(*logits).last_dim();
                    let scale = dy[0] / T::from_f64(labels.len() as f64);
                    let gl = self.grad_buf(grads, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..kc {
                            let onehot = if j == label { T::ONE } else { T::ZERO };
                            gl[r * kc + j] += scale * (probs[r * kc + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.needs_grad(*pred) {
                    let p = self.value(*pred).data();
                    let scale = T::from_f64(2.0) * dy[0] / T::from_f64(p.len() as f64);
                    let gp = self.grad_buf(grads, *pred);
                    for ((g, &a), &b) in gp.iter_mut().zip(p).zip(target) {
                        *g += scale * (a - b);
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs_grad(*x) {
                    let d = dy[0];
                    for g in self.grad_buf(grads, *x).iter_mut() {
                        *g += d;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let s = self.value(q).shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (nq, nk, nv) = (self.needs_grad(q), self.needs_grad(k), self.needs_grad(v));
        let mut gq = nq.then(|| grads[q.0].take().unwrap_or_else(|| vec![T::ZERO; qd.len()]));
        let mut gk = nk.then(|| grads[k.0].take().unwrap_or_else(|| vec![T::ZERO; kd.len()]));
        let mut gv = nv.then(|| grads[v.0].take().unwrap_or_else(|| vec![T::ZERO; vd.len()]));
        let mut dp = vec![T::ZERO; n * n];
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * n * d + h * dh;
                let p = &probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                let dov = head_view(dy, off, n, dh, d);
                if let Some(gv) = gv.as_mut() {
                    gemm(T::ONE, MatRef::row_major(p, n, n).t(), dov, T::ONE, &mut gv[off..], d);
                }
                if !(nq || nk) {
                    continue;
                }
                gemm(T::ONE, dov, head_view(vd, off, n, dh, d).t(), T::ZERO, &mut dp, n);
                for (dpr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                    let mut dot = T::ZERO;
                    for j in 0..n {
                        dot += dpr[j] * pr[j];
                    }
                    for j in 0..n {
                        dpr[j] = pr[j] * (dpr[j] - dot);
                    }
                }
                let ds = MatRef::row_major(&dp, n, n);
                if let Some(gq) = gq.as_mut() {
                    gemm(scale, ds, head_view(kd, off, n, dh, d), T::ONE, &mut gq[off..], d);
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(scale, ds.t(), head_view(qd, off, n, dh, d), T::ONE, &mut gk[off..], d);
                }
            }
        }
        // Inputs may alias (q == k); merge rather than overwrite.
        for (id, g) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(g) = g {
                match grads[id.0].as_mut() {
                    Some(existing) => add_into(existing, &g),
                    None => grads[id.0] = Some(g),
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> &'g mut [T] {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![T::ZERO; len])
    }
}

fn head_view<T>(data: &[T], offset: usize, n: usize, dh: usize, d: usize) -> MatRef<'_, T> {
    MatRef { data: &data[offset..], rows: n, cols: dh, row_stride: d, col_stride: 1 }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        let y = tape.softmax_lastdim(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_exactly_zero() {
        for c in [0.1f32, -3.7, 1e3, 0.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::full(&[2, 7], c), false);
            let g = tape.leaf(Tensor::full(&[7], 1.0), false);
            let b = tape.leaf(Tensor::zeros(&[7]), false);
            let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == 0.0), "c = {c}");
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]), false);
        let g = tape.leaf(Tensor::zeros(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn linear_gradient_replicates_input_per_row() {
        // loss = sum(x W): dL/dW[i][j] = x[i] for every output column j.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[1.0, -2.0, 0.5]), false);
        let w = tape.param("w", Tensor::zeros(&[3, 2]), true);
        let b = tape.param("b", Tensor::zeros(&[2]), true);
        let y = tape.linear(x, w, b).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params()["w"].data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
        assert_eq!(grads.params()["b"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", t(&[2], &[1.0, 2.0]), true);
        let _unused = tape.param("unused", t(&[3], &[5.0, 6.0, 7.0]), true);
        let frozen = tape.param("frozen", t(&[2], &[1.0, 1.0]), false);
        let s = tape.add(a, frozen).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params()["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.params()["a"].data(), &[1.0, 1.0]);
        assert!(!grads.params().contains_key("frozen"));
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let mut tape = Tape::new();
        let a = tape.param("a", t(&[2], &[1.0, f32::INFINITY]), true);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(a);
        assert!(matches!(tape.backward(s), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn attention_with_uniform_keys_averages_values() {
        // Identical keys give uniform attention, so each output row is the mean of V.
        let mut tape = Tape::new();
        let q = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let k = tape.leaf(t(&[1, 2, 2], &[1.0, 1.0, 1.0, 1.0]), false);
        let v = tape.leaf(t(&[1, 2, 2], &[2.0, 4.0, 6.0, 8.0]), false);
        let o = tape.scaled_dot_attention(q, k, v, 2).unwrap();
        assert_eq!(tape.value(o).data(), &[4.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn upsample_copies_source_token() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 1], &[3.0, 5.0]), false);
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 4, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 5.0, 5.0, 3.0, 3.0, 5.0, 5.0]);
    }
}
