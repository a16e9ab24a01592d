//! Dense tensors on a reverse-mode gradient tape.
//!
//! The tape is define-by-run: every forward pass builds a fresh tape, records
//! each operation with its input ids, and `backward` replays them once in
//! reverse. Tensors are rank 1..=3 (batch x channel x time at most), row-major.
//! Gradients accumulate into leaves; intermediate adjoints are reset at the
//! start of every backward, so calling `backward` twice without clearing leaf
//! gradients sums the two passes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceKind {
    Mean,
    Sum,
    Max,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ActKind {
    Relu,
    LeakyRelu,
    Sigmoid,
}

enum Op<S: Scalar> {
    Leaf,
    Elem {
        kind: ElemKind,
        a: NodeId,
        b: NodeId,
    },
    MulScalar {
        a: NodeId,
        c: S,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    Reduce {
        kind: ReduceKind,
        a: NodeId,
        axis: usize,
        argmax: Vec<usize>,
    },
    MeanAll {
        a: NodeId,
    },
    SumAll {
        a: NodeId,
    },
    Act {
        kind: ActKind,
        a: NodeId,
        slope: S,
    },
    AvgPool {
        a: NodeId,
        k: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    RsqrtShift {
        a: NodeId,
        eps: S,
    },
}

struct Node<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    is_leaf: bool,
    op: Op<S>,
}

/// Record of operations for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// View any rank 1..=3 shape as (d0, d1, d2) with leading 1s.
fn as3(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        1 => [1, 1, shape[0]],
        2 => [1, shape[0], shape[1]],
        3 => [shape[0], shape[1], shape[2]],
        _ => unreachable!("rank checked at creation"),
    }
}

/// Element strides of `b` inside `a`'s padded index space; 0 on broadcast
/// axes. None when the shapes are incompatible.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<[usize; 3]> {
    if a.len() != b.len() {
        return None;
    }
    let a3 = as3(a);
    let b3 = as3(b);
    let mut strides = [0usize; 3];
    let mut stride = 1;
    for d in (0..3).rev() {
        if b3[d] == a3[d] {
            strides[d] = stride;
        } else if b3[d] == 1 {
            strides[d] = 0;
        } else {
            return None;
        }
        stride *= b3[d];
    }
    Some(strides)
}

#[inline]
fn debug_check_finite<S: Scalar>(data: &[S], what: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {}",
        what
    );
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut s0 = S::ZERO;
    let mut s1 = S::ZERO;
    let mut s2 = S::ZERO;
    let mut s3 = S::ZERO;
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (pa, pb) in (&mut ca).zip(&mut cb) {
        s0 += pa[0] * pb[0];
        s1 += pa[1] * pb[1];
        s2 += pa[2] * pb[2];
        s3 += pa[3] * pb[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += *x * *y;
    }
    s
}

fn axpy<S: Scalar>(out: &mut [S], a: S, x: &[S]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * *v;
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. `requires_grad` marks it as a gradient leaf.
    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Dim(format!(
                "tensor rank must be 1..=3, got {:?}",
                shape
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, true, Op::Leaf))
    }

    fn push(
        &mut self,
        data: Vec<S>,
        shape: Vec<usize>,
        needs_grad: bool,
        is_leaf: bool,
        op: Op<S>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
            is_leaf,
            op,
        });
        id
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` target w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- elementwise ----------------------------------------------------

    /// `a op b` with `b` broadcastable to `a` (extent-1 axes of `b` stretch).
    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: ElemKind) -> Result<NodeId> {
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let strides = broadcast_strides(&a_shape, &b_shape).ok_or(Error::Broadcast {
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        })?;
        let [d0, d1, d2] = as3(&a_shape);
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(d0 * d1 * d2);
        for i in 0..d0 {
            for j in 0..d1 {
                let arow = &av[(i * d1 + j) * d2..(i * d1 + j) * d2 + d2];
                let boff = i * strides[0] + j * strides[1];
                if strides[2] == 0 {
                    let bval = bv[boff];
                    match kind {
                        ElemKind::Add => out.extend(arow.iter().map(|&x| x + bval)),
                        ElemKind::Sub => out.extend(arow.iter().map(|&x| x - bval)),
                        ElemKind::Mul => out.extend(arow.iter().map(|&x| x * bval)),
                    }
                } else {
                    let brow = &bv[boff..boff + d2];
                    match kind {
                        ElemKind::Add => out.extend(arow.iter().zip(brow).map(|(&x, &y)| x + y)),
                        ElemKind::Sub => out.extend(arow.iter().zip(brow).map(|(&x, &y)| x - y)),
                        ElemKind::Mul => out.extend(arow.iter().zip(brow).map(|(&x, &y)| x * y)),
                    }
                }
            }
        }
        debug_check_finite(&out, "elementwise");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, a_shape, needs, false, Op::Elem { kind, a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Mul)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        debug_check_finite(&out, "mul_scalar");
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(out, shape, needs, false, Op::MulScalar { a, c })
    }

    // ---- matmul ----------------------------------------------------------

    /// (m x k) . (k x n) -> (m x n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(Error::Dim(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (m, k) = (a_shape[0], a_shape[1]);
        let (k2, n) = (b_shape[0], b_shape[1]);
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                a_shape, b_shape
            )));
        }
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(orow, av[i * k + p], &bv[p * n..(p + 1) * n]);
            }
        }
        debug_check_finite(&out, "matmul");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], needs, false, Op::Matmul { a, b }))
    }

    // ---- conv1d ----------------------------------------------------------

    /// Cross-correlation with zero 'same' padding, stride 1.
    /// x: (B, Cin, L), w: (Cout, Cin, K) with K odd, bias: (Cout).
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Dim(format!(
                "conv1d needs rank-3 input and weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (bsz, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if cin != wcin {
            return Err(Error::Dim(format!(
                "conv1d channel mismatch: input has {} channels, weight expects {}",
                cin, wcin
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel width must be odd for 'same' padding, got {}",
                k
            )));
        }
        if bs != [cout] {
            return Err(Error::Dim(format!(
                "conv1d bias shape {:?} does not match {} output channels",
                bs, cout
            )));
        }
        let pad = (k - 1) / 2;
        let xv = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let bv = &self.nodes[bias.0].data;
        let mut out = vec![S::ZERO; bsz * cout * l];
        for b in 0..bsz {
            for co in 0..cout {
                let orow = &mut out[(b * cout + co) * l..(b * cout + co) * l + l];
                let bias_val = bv[co];
                for o in orow.iter_mut() {
                    *o = bias_val;
                }
                for ci in 0..cin {
                    let xrow = &xv[(b * cin + ci) * l..(b * cin + ci) * l + l];
                    let wrow = &wv[(co * cin + ci) * k..(co * cin + ci) * k + k];
                    for (kk, &wval) in wrow.iter().enumerate() {
                        // out[t] += w[kk] * x[t + kk - pad] over valid t
                        if kk >= pad {
                            let s = kk - pad;
                            if s < l {
                                axpy(&mut orow[..l - s], wval, &xrow[s..]);
                            }
                        } else {
                            let s = pad - kk;
                            if s < l {
                                axpy(&mut orow[s..], wval, &xrow[..l - s]);
                            }
                        }
                    }
                }
            }
        }
        debug_check_finite(&out, "conv1d");
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(
            out,
            vec![bsz, cout, l],
            needs,
            false,
            Op::Conv1d { x, w, bias },
        ))
    }

    // ---- reductions --------------------------------------------------------

    /// Reduce one axis to extent 1 (keepdim). Max routes its gradient to the
    /// first maximal element along the axis.
    pub fn reduce(&mut self, a: NodeId, axis: usize, kind: ReduceKind) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dim(format!(
                "reduce axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let pad_axis = axis + (3 - shape.len());
        let [d0, d1, d2] = as3(&shape);
        let dims = [d0, d1, d2];
        let red = dims[pad_axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let out_len = numel(&out_shape);
        let av = &self.nodes[a.0].data;
        let mut out = vec![S::ZERO; out_len];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0usize; out_len];
        }
        // outer = product of dims before axis, inner = product after
        let outer: usize = dims[..pad_axis].iter().product();
        let inner: usize = dims[pad_axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * red * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = S::ZERO;
                        for r in 0..red {
                            s += av[base + r * inner];
                        }
                        if kind == ReduceKind::Mean {
                            s = s / S::from_f64(red as f64);
                        }
                        out[o * inner + i] = s;
                    }
                    ReduceKind::Max => {
                        let mut best = av[base];
                        let mut best_idx = base;
                        for r in 1..red {
                            let v = av[base + r * inner];
                            if v > best {
                                best = v;
                                best_idx = base + r * inner;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_idx;
                    }
                }
            }
        }
        debug_check_finite(&out, "reduce");
        let needs = self.needs(a);
        Ok(self.push(
            out,
            out_shape,
            needs,
            false,
            Op::Reduce {
                kind,
                a,
                axis: pad_axis,
                argmax,
            },
        ))
    }

    /// Mean over every element; output shape [1].
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len();
        let mut s = S::ZERO;
        for &v in &self.nodes[a.0].data {
            s += v;
        }
        let out = vec![s / S::from_f64(n as f64)];
        debug_check_finite(&out, "mean_all");
        let needs = self.needs(a);
        self.push(out, vec![1], needs, false, Op::MeanAll { a })
    }

    /// Sum over every element; output shape [1].
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = S::ZERO;
        for &v in &self.nodes[a.0].data {
            s += v;
        }
        let out = vec![s];
        debug_check_finite(&out, "sum_all");
        let needs = self.needs(a);
        self.push(out, vec![1], needs, false, Op::SumAll { a })
    }

    // ---- activations -------------------------------------------------------

    pub fn activation(&mut self, a: NodeId, kind: ActKind, slope: S) -> NodeId {
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| match kind {
                ActKind::Relu => x.maximum(S::ZERO),
                ActKind::LeakyRelu => {
                    if x >= S::ZERO {
                        x
                    } else {
                        slope * x
                    }
                }
                ActKind::Sigmoid => sigmoid(x),
            })
            .collect();
        debug_check_finite(&out, "activation");
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(out, shape, needs, false, Op::Act { kind, a, slope })
    }

    // ---- pooling -----------------------------------------------------------

    /// Non-overlapping average pooling over time; trailing remainder dropped.
    pub fn avg_pool1d(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        if k < 1 {
            return Err(Error::Config("avg_pool1d kernel must be >= 1".into()));
        }
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dim(format!(
                "avg_pool1d needs rank-3 input, got {:?}",
                shape
            )));
        }
        let (bsz, c, l) = (shape[0], shape[1], shape[2]);
        if l < k {
            return Err(Error::Dim(format!(
                "avg_pool1d kernel {} exceeds time extent {}",
                k, l
            )));
        }
        let lo = l / k;
        let av = &self.nodes[a.0].data;
        let inv_k = S::from_f64(1.0 / k as f64);
        let mut out = Vec::with_capacity(bsz * c * lo);
        for bc in 0..bsz * c {
            let row = &av[bc * l..bc * l + l];
            for t in 0..lo {
                let mut s = S::ZERO;
                for &v in &row[t * k..t * k + k] {
                    s += v;
                }
                out.push(s * inv_k);
            }
        }
        debug_check_finite(&out, "avg_pool1d");
        let needs = self.needs(a);
        Ok(self.push(out, vec![bsz, c, lo], needs, false, Op::AvgPool { a, k }))
    }

    // ---- shape -------------------------------------------------------------

    /// Concatenate along the channel axis: (B,C1,L) ++ (B,C2,L) -> (B,C1+C2,L).
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Dim(format!(
                "concat_channels needs (B,C,L) inputs agreeing on B and L, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (bsz, c1, c2, l) = (sa[0], sa[1], sb[1], sa[2]);
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(bsz * (c1 + c2) * l);
        for i in 0..bsz {
            out.extend_from_slice(&av[i * c1 * l..(i + 1) * c1 * l]);
            out.extend_from_slice(&bv[i * c2 * l..(i + 1) * c2 * l]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            vec![bsz, c1 + c2, l],
            needs,
            false,
            Op::Concat { a, b },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        if new_shape.is_empty() || new_shape.len() > 3 {
            return Err(Error::Dim(format!(
                "tensor rank must be 1..=3, got {:?}",
                new_shape
            )));
        }
        if numel(new_shape) != self.nodes[a.0].data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                new_shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.needs(a);
        Ok(self.push(data, new_shape.to_vec(), needs, false, Op::Reshape { a }))
    }

    /// 1 / sqrt(x + eps), used by the normalization layers.
    pub fn rsqrt_shift(&mut self, a: NodeId, eps: S) -> NodeId {
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| S::ONE / (x + eps).sqrt())
            .collect();
        debug_check_finite(&out, "rsqrt_shift");
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(out, shape, needs, false, Op::RsqrtShift { a, eps })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate adjoints are reset each time.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Dim("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Dim(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Reset non-leaf adjoints; leaves keep accumulating.
        for node in &mut self.nodes {
            if !node.is_leaf {
                if let Some(g) = node.grad.as_mut() {
                    for v in g.iter_mut() {
                        *v = S::ZERO;
                    }
                }
            }
        }
        self.seed_grad(loss);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.propagate(i)?;
        }
        Ok(())
    }

    fn seed_grad(&mut self, loss: NodeId) {
        let node = &mut self.nodes[loss.0];
        match node.grad.as_mut() {
            Some(g) => g[0] += S::ONE,
            None => node.grad = Some(vec![S::ONE]),
        }
    }

    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id.0].grad.is_none() {
            let n = self.nodes[id.0].data.len();
            self.nodes[id.0].grad = Some(vec![S::ZERO; n]);
        }
    }

    /// Take ownership of a node's grad buffer to satisfy the borrow checker
    /// while accumulating into input grads; restored afterwards.
    fn take_grad(&mut self, id: usize) -> Vec<S> {
        self.nodes[id].grad.take().expect("grad present")
    }

    fn propagate(&mut self, i: usize) -> Result<()> {
        // Cheap to match twice: first gather input ids, then dispatch.
        let g = self.take_grad(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Elem { kind, a, b } => {
                let (kind, a, b) = (*kind, *a, *b);
                self.backward_elem(&g, kind, a, b);
            }
            Op::MulScalar { a, c } => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    self.ensure_grad(a);
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for (gv, &go) in ga.iter_mut().zip(&g) {
                        *gv += go * c;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                self.backward_matmul(i, &g, a, b);
            }
            Op::Conv1d { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                self.backward_conv1d(i, &g, x, w, bias);
            }
            Op::Reduce { kind, a, axis, .. } => {
                let (kind, a, axis) = (*kind, *a, *axis);
                self.backward_reduce(i, &g, kind, a, axis);
            }
            Op::MeanAll { a } => {
                let a = *a;
                if self.needs(a) {
                    self.ensure_grad(a);
                    let n = self.nodes[a.0].data.len();
                    let share = g[0] / S::from_f64(n as f64);
                    for gv in self.nodes[a.0].grad.as_mut().unwrap() {
                        *gv += share;
                    }
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                if self.needs(a) {
                    self.ensure_grad(a);
                    for gv in self.nodes[a.0].grad.as_mut().unwrap() {
                        *gv += g[0];
                    }
                }
            }
            Op::Act { kind, a, slope } => {
                let (kind, a, slope) = (*kind, *a, *slope);
                if self.needs(a) {
                    self.ensure_grad(a);
                    match kind {
                        ActKind::Relu | ActKind::LeakyRelu => {
                            let eff_slope = if kind == ActKind::Relu {
                                S::ZERO
                            } else {
                                slope
                            };
                            let input = &mut self.nodes[a.0];
                            let ga = input.grad.as_mut().unwrap();
                            for ((gv, &x), &go) in ga.iter_mut().zip(&input.data).zip(&g) {
                                let d = if x >= S::ZERO { S::ONE } else { eff_slope };
                                *gv += go * d;
                            }
                        }
                        ActKind::Sigmoid => {
                            let out = self.nodes[i].data.clone();
                            let ga = self.nodes[a.0].grad.as_mut().unwrap();
                            for ((gv, &s), &go) in ga.iter_mut().zip(&out).zip(&g) {
                                *gv += go * s * (S::ONE - s);
                            }
                        }
                    }
                }
            }
            Op::AvgPool { a, k } => {
                let (a, k) = (*a, *k);
                if self.needs(a) {
                    self.ensure_grad(a);
                    let shape = self.nodes[i].shape.clone();
                    let (bsz, c, lo) = (shape[0], shape[1], shape[2]);
                    let l = self.nodes[a.0].shape[2];
                    let inv_k = S::from_f64(1.0 / k as f64);
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for bc in 0..bsz * c {
                        let grow = &g[bc * lo..bc * lo + lo];
                        let garow = &mut ga[bc * l..bc * l + l];
                        for (t, &gv) in grow.iter().enumerate() {
                            let share = gv * inv_k;
                            for slot in &mut garow[t * k..t * k + k] {
                                *slot += share;
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let (bsz, c1, l) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1], s[2])
                };
                let c2 = self.nodes[b.0].shape[1];
                let ctot = c1 + c2;
                if self.needs(a) {
                    self.ensure_grad(a);
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for i2 in 0..bsz {
                        let src = &g[i2 * ctot * l..i2 * ctot * l + c1 * l];
                        for (gv, &gs) in ga[i2 * c1 * l..(i2 + 1) * c1 * l].iter_mut().zip(src) {
                            *gv += gs;
                        }
                    }
                }
                if self.needs(b) {
                    self.ensure_grad(b);
                    let gb = self.nodes[b.0].grad.as_mut().unwrap();
                    for i2 in 0..bsz {
                        let src = &g[i2 * ctot * l + c1 * l..(i2 + 1) * ctot * l];
                        for (gv, &gs) in gb[i2 * c2 * l..(i2 + 1) * c2 * l].iter_mut().zip(src) {
                            *gv += gs;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if self.needs(a) {
                    self.ensure_grad(a);
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for (gv, &gs) in ga.iter_mut().zip(&g) {
                        *gv += gs;
                    }
                }
            }
            Op::RsqrtShift { a, eps } => {
                let (a, eps) = (*a, *eps);
                if self.needs(a) {
                    self.ensure_grad(a);
                    let out = self.nodes[i].data.clone();
                    let _ = eps;
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    let half = S::from_f64(0.5);
                    for ((gv, &o), &go) in ga.iter_mut().zip(&out).zip(&g) {
                        // d/dx (x+eps)^(-1/2) = -1/2 (x+eps)^(-3/2) = -out^3/2
                        *gv += -(half * o * o * o) * go;
                    }
                }
            }
        }
        self.nodes[i].grad = Some(g);
        Ok(())
    }

    fn backward_elem(&mut self, g: &[S], kind: ElemKind, a: NodeId, b: NodeId) {
        let a_shape = self.nodes[a.0].shape.clone();
        let b_shape = self.nodes[b.0].shape.clone();
        let strides = broadcast_strides(&a_shape, &b_shape).expect("validated at forward");
        let [d0, d1, d2] = as3(&a_shape);
        if self.needs(a) {
            self.ensure_grad(a);
            match kind {
                ElemKind::Add | ElemKind::Sub => {
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for (gv, &gs) in ga.iter_mut().zip(g) {
                        *gv += gs;
                    }
                }
                ElemKind::Mul => {
                    let bdata = self.nodes[b.0].data.clone();
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    for i0 in 0..d0 {
                        for j in 0..d1 {
                            let base = (i0 * d1 + j) * d2;
                            let boff = i0 * strides[0] + j * strides[1];
                            for t in 0..d2 {
                                ga[base + t] += g[base + t] * bdata[boff + t * strides[2]];
                            }
                        }
                    }
                }
            }
        }
        if self.needs(b) {
            self.ensure_grad(b);
            let adata = if kind == ElemKind::Mul {
                self.nodes[a.0].data.clone()
            } else {
                Vec::new()
            };
            let gb = self.nodes[b.0].grad.as_mut().unwrap();
            for i0 in 0..d0 {
                for j in 0..d1 {
                    let base = (i0 * d1 + j) * d2;
                    let boff = i0 * strides[0] + j * strides[1];
                    for t in 0..d2 {
                        let gs = g[base + t];
                        let slot = &mut gb[boff + t * strides[2]];
                        match kind {
                            ElemKind::Add => *slot += gs,
                            ElemKind::Sub => *slot -= gs,
                            ElemKind::Mul => *slot += gs * adata[base + t],
                        }
                    }
                }
            }
        }
    }

    fn backward_matmul(&mut self, _i: usize, g: &[S], a: NodeId, b: NodeId) {
        let (m, k) = {
            let s = &self.nodes[a.0].shape;
            (s[0], s[1])
        };
        let n = self.nodes[b.0].shape[1];
        if self.needs(a) {
            self.ensure_grad(a);
            let bdata = self.nodes[b.0].data.clone();
            let ga = self.nodes[a.0].grad.as_mut().unwrap();
            // ga[i,p] += dot(g[i,:], b[p,:])
            for i2 in 0..m {
                let grow = &g[i2 * n..(i2 + 1) * n];
                for p in 0..k {
                    ga[i2 * k + p] += dot(grow, &bdata[p * n..(p + 1) * n]);
                }
            }
        }
        if self.needs(b) {
            self.ensure_grad(b);
            let adata = self.nodes[a.0].data.clone();
            let gb = self.nodes[b.0].grad.as_mut().unwrap();
            // gb[p,:] += a[i,p] * g[i,:]
            for i2 in 0..m {
                let grow = &g[i2 * n..(i2 + 1) * n];
                for p in 0..k {
                    axpy(&mut gb[p * n..(p + 1) * n], adata[i2 * k + p], grow);
                }
            }
        }
    }

    fn backward_conv1d(&mut self, _i: usize, g: &[S], x: NodeId, w: NodeId, bias: NodeId) {
        let (bsz, cin, l) = {
            let s = &self.nodes[x.0].shape;
            (s[0], s[1], s[2])
        };
        let (cout, k) = {
            let s = &self.nodes[w.0].shape;
            (s[0], s[2])
        };
        let pad = (k - 1) / 2;
        if self.needs(x) {
            self.ensure_grad(x);
            let wdata = self.nodes[w.0].data.clone();
            let gx = self.nodes[x.0].grad.as_mut().unwrap();
            for b in 0..bsz {
                for co in 0..cout {
                    let grow = &g[(b * cout + co) * l..(b * cout + co) * l + l];
                    for ci in 0..cin {
                        let gxrow = &mut gx[(b * cin + ci) * l..(b * cin + ci) * l + l];
                        let wrow = &wdata[(co * cin + ci) * k..(co * cin + ci) * k + k];
                        for (kk, &wval) in wrow.iter().enumerate() {
                            // forward: out[t] += w * x[t + kk - pad]
                            if kk >= pad {
                                let s = kk - pad;
                                if s < l {
                                    axpy(&mut gxrow[s..], wval, &grow[..l - s]);
                                }
                            } else {
                                let s = pad - kk;
                                if s < l {
                                    axpy(&mut gxrow[..l - s], wval, &grow[s..]);
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.needs(w) {
            self.ensure_grad(w);
            let xdata = self.nodes[x.0].data.clone();
            let gw = self.nodes[w.0].grad.as_mut().unwrap();
            for b in 0..bsz {
                for co in 0..cout {
                    let grow = &g[(b * cout + co) * l..(b * cout + co) * l + l];
                    for ci in 0..cin {
                        let xrow = &xdata[(b * cin + ci) * l..(b * cin + ci) * l + l];
                        let gwrow = &mut gw[(co * cin + ci) * k..(co * cin + ci) * k + k];
                        for (kk, slot) in gwrow.iter_mut().enumerate() {
                            if kk >= pad {
                                let s = kk - pad;
                                if s < l {
                                    *slot += dot(&grow[..l - s], &xrow[s..]);
                                }
                            } else {
                                let s = pad - kk;
                                if s < l {
                                    *slot += dot(&grow[s..], &xrow[..l - s]);
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.needs(bias) {
            self.ensure_grad(bias);
            let gb = self.nodes[bias.0].grad.as_mut().unwrap();
            for b in 0..bsz {
                for co in 0..cout {
                    let grow = &g[(b * cout + co) * l..(b * cout + co) * l + l];
                    let mut s = S::ZERO;
                    for &gv in grow {
                        s += gv;
                    }
                    gb[co] += s;
                }
            }
        }
    }

    fn backward_reduce(&mut self, i: usize, g: &[S], kind: ReduceKind, a: NodeId, pad_axis: usize) {
        if !self.needs(a) {
            return;
        }
        self.ensure_grad(a);
        let dims = as3(&self.nodes[a.0].shape);
        let red = dims[pad_axis];
        let outer: usize = dims[..pad_axis].iter().product();
        let inner: usize = dims[pad_axis + 1..].iter().product();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let scale = if kind == ReduceKind::Mean {
                    S::from_f64(1.0 / red as f64)
                } else {
                    S::ONE
                };
                let ga = self.nodes[a.0].grad.as_mut().unwrap();
                for o in 0..outer {
                    for i2 in 0..inner {
                        let gv = g[o * inner + i2] * scale;
                        let base = o * red * inner + i2;
                        for r in 0..red {
                            ga[base + r * inner] += gv;
                        }
                    }
                }
            }
            ReduceKind::Max => {
                let argmax = match &self.nodes[i].op {
                    Op::Reduce { argmax, .. } => argmax.clone(),
                    _ => unreachable!(),
                };
                let ga = self.nodes[a.0].grad.as_mut().unwrap();
                for (out_idx, &src_idx) in argmax.iter().enumerate() {
                    ga[src_idx] += g[out_idx];
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Smallest |input| across every ReLU / leaky-ReLU recorded on the tape
    /// (infinity when none applies); the gradient-check harness rejects
    /// instances where a finite-difference step could cross the kink.
    pub fn activation_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Act {
                kind: ActKind::Relu | ActKind::LeakyRelu,
                a,
                ..
            } = node.op
            {
                for &v in &self.nodes[a.0].data {
                    margin = margin.min(v.to_f64().abs());
                }
            }
        }
        margin
    }

    /// Smallest gap between the winner and runner-up across every max
    /// reduction recorded on the tape (infinity when none applies). The
    /// gradient-check harness uses this to reject instances where a finite
    /// difference step could flip an argmax.
    pub fn max_reduce_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Reduce {
                kind: ReduceKind::Max,
                a,
                axis,
                ..
            } = node.op
            {
                let dims = as3(&self.nodes[a.0].shape);
                let red = dims[axis];
                if red < 2 {
                    continue;
                }
                let outer: usize = dims[..axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let data = &self.nodes[a.0].data;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * red * inner + i;
                        let mut best = f64::NEG_INFINITY;
                        let mut second = f64::NEG_INFINITY;
                        for r in 0..red {
                            let v = data[base + r * inner].to_f64();
                            if v > best {
                                second = best;
                                best = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        margin = margin.min(best - second);
                    }
                }
            }
        }
        margin
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    // Split on sign to avoid overflow in exp.
    if x >= S::ZERO {
        let e = (-x).exp();
        S::ONE / (S::ONE + e)
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}
