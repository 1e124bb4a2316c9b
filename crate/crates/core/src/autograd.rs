//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes that do not
//! depend on an input or parameter are marked constant and skipped during
//! [`Graph::backward`]. Gradients are accumulated in node order, so results are
//! bit-reproducible for a fixed sequence of operations.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map over rows: `out[o] = sum_(i, w) w * x[i]`.
pub type RowTaps = Vec<Vec<(usize, f64)>>;

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    SparseRows { x: Var, taps: RowTaps },
    SegmentMax { x: Var, argmax: Vec<Option<usize>> },
    DepthwiseConv { x: Var, w: Var, k: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Focal { p: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const FOCAL_EPS: f64 = 1e-6;

/// Tape of one forward computation.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    frozen: bool,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            frozen: false,
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            frozen: false,
        }
    }

    /// A graph whose parameters are treated as constants (inference only).
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut g = Self::with_params(store);
        g.frozen = true;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store.get(id).clone();
        let needs = !self.frozen;
        let v = self.push(value, Op::Param, needs);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Breaks gradient flow: returns a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.same_shape(a, b, what);
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, mul: bool) -> Var {
        let d = self.value(a).last_dim();
        assert_eq!(
            self.value(b).numel(),
            d,
            "row broadcast: operand of {} elements against last dim {d}",
            self.value(b).numel()
        );
        let va = self.value(a);
        let vb = self.value(b).data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| if mul { x * vb[i % d] } else { x + vb[i % d] })
            .collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        self.push(t, op, ng)
    }

    /// `a + b` where `b` has the size of `a`'s last axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.row_broadcast(a, b, false)
    }

    /// `a * b` where `b` has the size of `a`'s last axis.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.row_broadcast(a, b, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x * c).collect());
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x + c).collect());
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// `[.., K] x [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D, got {sb:?}");
        let k = *sa.last().expect("matmul lhs must have rank >= 1");
        assert_eq!(k, sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::MatMul(a, b), ng)
    }

    /// Batched matmul: `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3, "bmm operands must be 3-D: {sa:?} {sb:?}");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k, "bmm inner dims");
            sb[1]
        } else {
            assert_eq!(sb[1], k, "bmm inner dims");
            sb[2]
        };
        let mut out = vec![0.0; bsz * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[bsz, m, n], out), Op::Bmm { a, b, trans_b }, ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let t = permute_tensor(self.value(a), perm);
        let ng = self.ng(a);
        self.push(t, Op::Permute(a, perm.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(va.shape(), out);
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect());
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel().max(1) as f64;
        let s: f64 = va.data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (x, y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[axis], "slice {start}+{len} beyond axis size {}", s[axis]);
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out), Op::Slice { a, axis, start }, ng)
    }

    /// Rows of `x` (viewed as `[rows, last_dim]`) combined by a sparse linear map.
    pub fn sparse_rows(&mut self, x: Var, taps: RowTaps) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let rows = vx.numel() / d.max(1);
        let mut out = vec![0.0; taps.len() * d];
        for (o, tl) in taps.iter().enumerate() {
            let dst = &mut out[o * d..(o + 1) * d];
            for &(i, w) in tl {
                assert!(i < rows, "sparse_rows tap {i} out of {rows} rows");
                let src = vx.row(i);
                for (y, s) in dst.iter_mut().zip(src) {
                    *y += w * s;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[taps.len(), d], out), Op::SparseRows { x, taps }, ng)
    }

    /// Selects rows of `x` (viewed as `[rows, last_dim]`); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let taps = idx.iter().map(|&i| vec![(i, 1.0)]).collect();
        self.sparse_rows(x, taps)
    }

    /// Column-wise max over each group of rows of `x` (`[rows, D]`). Empty groups yield zeros.
    pub fn segment_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vec![0.0; groups.len() * d];
        let mut argmax = vec![None; groups.len() * d];
        for (gi, grp) in groups.iter().enumerate() {
            for c in 0..d {
                let mut best: Option<(usize, f64)> = None;
                for &r in grp {
                    let v = vx.data()[r * d + c];
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some((r, v));
                    }
                }
                if let Some((r, v)) = best {
                    out[gi * d + c] = v;
                    argmax[gi * d + c] = Some(r * d + c);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[groups.len(), d], out), Op::SegmentMax { x, argmax }, ng)
    }

    /// Depthwise `k x k` convolution with zero "same" padding on a channels-last map.
    ///
    /// `x` is `[H, W, C]`, `w` is `[k, k, C]`, `k` odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "depthwise_conv input must be [H, W, C]");
        let (h, wd, c) = (sx[0], sx[1], sx[2]);
        let k = sw[0];
        assert!(k % 2 == 1 && sw == [k, k, c], "depthwise kernel shape {sw:?} for {c} channels");
        let half = (k / 2) as isize;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; h * wd * c];
        for i in 0..h as isize {
            for j in 0..wd as isize {
                let dst = &mut out[(i as usize * wd + j as usize) * c..][..c];
                for di in -half..=half {
                    let ii = i + di;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in -half..=half {
                        let jj = j + dj;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let src = &xv[(ii as usize * wd + jj as usize) * c..][..c];
                        let ker = &wv[((di + half) as usize * k + (dj + half) as usize) * c..][..c];
                        for ((y, s), kk) in dst.iter_mut().zip(src).zip(ker) {
                            *y += s * kk;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(&sx, out), Op::DepthwiseConv { x, w, k }, ng)
    }

    /// Normalises the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut out = vx.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(vx.shape(), out);
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Elementwise binary focal loss of probabilities `p` against 0/1 `targets`.
    ///
    /// Probabilities are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]`; the gradient is zero where clamping is active.
    pub fn focal(&mut self, p: Var, targets: &[f64], alpha: f64, gamma: f64) -> Var {
        let vp = self.value(p);
        assert_eq!(vp.numel(), targets.len(), "focal: {} probs vs {} targets", vp.numel(), targets.len());
        let data = vp
            .data()
            .iter()
            .zip(targets)
            .map(|(&pp, &y)| focal_value(pp, y, alpha, gamma))
            .collect();
        let t = Tensor::new(vp.shape(), data);
        let ng = self.ng(p);
        self.push(
            t,
            Op::Focal {
                p,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            ng,
        )
    }

    /// Gradients of scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let mut params = Vec::new();
        for (i, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                if let Some(g) = &grads[v.0] {
                    params.push((ParamId(i), g.clone()));
                }
            }
        }
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || go.to_vec());
                self.acc(grads, *b, || go.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || go.to_vec());
                self.acc(grads, *b, || go.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || go.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.acc(grads, *b, || go.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || go.iter().zip(vb).map(|(g, y)| g / y).collect());
                self.acc(grads, *b, || {
                    go.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect()
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                self.acc(grads, *a, || {
                    go.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect()
                });
                self.acc(grads, *b, || {
                    go.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect()
                });
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, || go.to_vec());
                let d = self.value(*b).numel();
                self.acc(grads, *b, || {
                    let mut s = vec![0.0; d];
                    for (i, g) in go.iter().enumerate() {
                        s[i % d] += g;
                    }
                    s
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let d = vb.len();
                self.acc(grads, *a, || go.iter().enumerate().map(|(i, g)| g * vb[i % d]).collect());
                self.acc(grads, *b, || {
                    let mut s = vec![0.0; d];
                    for (i, g) in go.iter().enumerate() {
                        s[i % d] += g * va[i];
                    }
                    s
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, || go.iter().map(|g| g * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, || go.to_vec()),
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k.max(1);
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, go, false, self.value(*b).data(), true, &mut da, false);
                    self.acc(grads, *a, || da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, go, false, &mut db, false);
                    self.acc(grads, *b, || db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let da_src = self.value(*a).data();
                let db_src = self.value(*b).data();
                if self.ng(*a) {
                    let mut da = vec![0.0; bsz * m * k];
                    for i in 0..bsz {
                        // dA = dC * op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            &go[i * m * n..(i + 1) * m * n],
                            false,
                            &db_src[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.acc(grads, *a, || da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        let a_i = &da_src[i * m * k..(i + 1) * m * k];
                        let g_i = &go[i * m * n..(i + 1) * m * n];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [N, K]: dB = dC^T * A
                            gemm(n, m, k, g_i, true, a_i, false, dst, false);
                        } else {
                            // dB = A^T * dC
                            gemm(k, m, n, a_i, true, g_i, false, dst, false);
                        }
                    }
                    self.acc(grads, *b, || db);
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_tensor(gout, &inv);
                self.acc(grads, *a, || back.into_data());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                self.acc(grads, *a, || {
                    let mut out = vec![0.0; y.len()];
                    for ((o, yr), gr) in out.chunks_mut(d).zip(y.chunks(d)).zip(go.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = yv * (gv - dot);
                        }
                    }
                    out
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, || {
                    go.iter().zip(x).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect()
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, || go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, || {
                    go.iter()
                        .zip(x)
                        .map(|(g, v)| {
                            if *v > 0.0 {
                                *g
                            } else if *v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, || vec![go[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, || vec![go[0] / n.max(1) as f64; n]);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.ng(p) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&go[base..base + len * inner]);
                        }
                        self.acc(grads, p, || g);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let full = s[*axis];
                let n = self.value(*a).numel();
                self.acc(grads, *a, || {
                    let mut g = vec![0.0; n];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        g[dst..dst + len * inner].copy_from_slice(&go[src..src + len * inner]);
                    }
                    g
                });
            }
            Op::SparseRows { x, taps } => {
                let n = self.value(*x).numel();
                let d = node.value.last_dim();
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; n];
                    for (o, tl) in taps.iter().enumerate() {
                        let src = &go[o * d..(o + 1) * d];
                        for &(i, w) in tl {
                            for (dst, s) in g[i * d..(i + 1) * d].iter_mut().zip(src) {
                                *dst += w * s;
                            }
                        }
                    }
                    g
                });
            }
            Op::SegmentMax { x, argmax } => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; n];
                    for (o, am) in argmax.iter().enumerate() {
                        if let Some(i) = am {
                            g[*i] += go[o];
                        }
                    }
                    g
                });
            }
            Op::DepthwiseConv { x, w, k } => {
                let s = self.shape(*x);
                let (h, wd, c) = (s[0], s[1], s[2]);
                let k = *k;
                let half = (k / 2) as isize;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for i in 0..h as isize {
                    for j in 0..wd as isize {
                        let g = &go[(i as usize * wd + j as usize) * c..][..c];
                        for di in -half..=half {
                            let ii = i + di;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for dj in -half..=half {
                                let jj = j + dj;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                let xo = (ii as usize * wd + jj as usize) * c;
                                let wo = ((di + half) as usize * k + (dj + half) as usize) * c;
                                for ch in 0..c {
                                    gx[xo + ch] += g[ch] * wv[wo + ch];
                                    gw[wo + ch] += g[ch] * xv[xo + ch];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, || gx);
                self.acc(grads, *w, || gw);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                self.acc(grads, *x, || {
                    let mut out = vec![0.0; y.len()];
                    for (r, ((o, yr), gr)) in
                        out.chunks_mut(d).zip(y.chunks(d)).zip(go.chunks(d)).enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = inv_std[r] * (gv - mg - yv * mgy);
                        }
                    }
                    out
                });
            }
            Op::Focal {
                p,
                targets,
                alpha,
                gamma,
            } => {
                let pv = self.value(*p).data();
                self.acc(grads, *p, || {
                    go.iter()
                        .zip(pv.iter().zip(targets))
                        .map(|(g, (&pp, &y))| g * focal_grad(pp, y, *alpha, *gamma))
                        .collect()
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        let delta = make();
        match &mut grads[v.0] {
            Some(g) => {
                for (x, d) in g.data_mut().iter_mut().zip(&delta) {
                    *x += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v), delta));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < FOCAL_EPS {
        (FOCAL_EPS, true)
    } else if p > 1.0 - FOCAL_EPS {
        (1.0 - FOCAL_EPS, true)
    } else {
        (p, false)
    }
}

/// Binary focal loss of one probability.
pub fn focal_value(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    if y >= 0.5 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn focal_grad(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (p, clamped) = clamp_prob(p);
    if clamped {
        return 0.0;
    }
    if y >= 0.5 {
        let q = 1.0 - p;
        let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        alpha * (dq * p.ln() - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        -(1.0 - alpha) * (dp * q.ln() - p.powf(gamma) / q)
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    assert_eq!(perm.len(), s.len(), "permutation rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let rank = s.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}
