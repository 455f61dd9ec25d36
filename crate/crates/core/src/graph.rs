//! Reverse-mode autodiff on a flat tape.
//!
//! Nodes are appended in forward order, so node indices are already a
//! topological order and the backward pass is a single reverse sweep.
//! Every op validates shapes up front, runs a fixed-order kernel, and
//! hard-errors on non-finite output. Gradient accumulation uses the same
//! fixed loops, so two identical graphs produce bit-identical gradients.

use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Result, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    AddBroadcast { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: S },
    AddConst { a: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Conv1d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad_left: usize },
    Relu { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    RowSoftmax { a: NodeId, temp: S },
    SelectTime { a: NodeId, index: usize },
    SliceLast { a: NodeId, start: usize },
    ConcatLast { parts: Vec<NodeId> },
    MeanTime { a: NodeId },
    L2Normalize { a: NodeId },
    Ln { a: NodeId },
    SumAll { a: NodeId },
    RowRenorm { a: NodeId, floor: S },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a leaf, or zeros in its shape when the loss does not
    /// reach it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match self.grads[id.0].as_ref() {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

// ---- dense kernels -------------------------------------------------------
// Fixed i-k-j loop orders; the inner loop always walks contiguous memory.

fn mm_nn<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
fn mm_nt<S: Scalar>(a: &[S], m: usize, n: usize, b: &[S], k: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = S::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn mm_tn<S: Scalar>(a: &[S], m: usize, k: usize, g: &[S], n: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn conv_out_len(t: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if t < k {
                return Err(TensorError::BadParam {
                    op: "conv1d",
                    detail: format!("kernel {k} longer than sequence {t} with valid padding"),
                });
            }
            Ok(((t - k) / stride + 1, 0))
        }
        Padding::Same => {
            let t_out = t.div_ceil(stride);
            let total = ((t_out - 1) * stride + k).saturating_sub(t);
            Ok((t_out, total / 2))
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, node_op: Op<S>, needs: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NotFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad: needs,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    // ---- elementwise and shape ops ----------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += v;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add { a, b }, needs)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape; `b` is tiled
    /// over the leading axes. Covers bias rows and positional tables.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let block = tb.numel();
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, &v) in chunk.iter_mut().zip(tb.data()) {
                *o += v;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("add_broadcast", out, Op::AddBroadcast { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= v;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        if !c.is_finite_s() {
            return Err(TensorError::NotFinite { op: "scale" });
        }
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        let needs = self.needs(a);
        self.push("scale", out, Op::Scale { a, c }, needs)
    }

    pub fn add_const(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        if !c.is_finite_s() {
            return Err(TensorError::NotFinite { op: "add_const" });
        }
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o += c;
        }
        let needs = self.needs(a);
        self.push("add_const", out, Op::AddConst { a }, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.maxs(S::ZERO);
        }
        let needs = self.needs(a);
        self.push("relu", out, Op::Relu { a }, needs)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.ln();
        }
        let needs = self.needs(a);
        self.push("ln", out, Op::Ln { a }, needs)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() < 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                shape: ta.shape().to_vec(),
                detail: "needs rank >= 2".into(),
            });
        }
        let out = transpose_value(ta);
        let needs = self.needs(a);
        self.push("transpose", out, Op::Transpose { a }, needs)
    }

    /// Matrix product with leading-axis broadcast. Either side may carry
    /// batch axes; a rank-2 side is shared across the other's batches.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = matmul_value(ta, tb)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul { a, b }, needs)
    }

    // ---- structured ops ----------------------------------------------------

    /// Temporal convolution over `[.., T, d_in]` with kernel `[k, d_in, d_out]`
    /// and bias `[d_out]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(TensorError::BadParam {
                op: "conv1d",
                detail: "stride must be positive".into(),
            });
        }
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() < 2 || tw.rank() != 3 || tb.rank() != 1 {
            return Err(TensorError::BadShape {
                op: "conv1d",
                shape: tx.shape().to_vec(),
                detail: format!(
                    "expect input [.., T, d_in], kernel [k, d_in, d_out], bias [d_out]; got kernel {} bias {}",
                    fmt_shape(tw.shape()),
                    fmt_shape(tb.shape())
                ),
            });
        }
        let d_in = tx.last_dim();
        let t = tx.shape()[tx.rank() - 2];
        let (k, wd_in, d_out) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wd_in != d_in || tb.last_dim() != d_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (t_out, pad_left) = conv_out_len(t, k, stride, padding)?;
        let batch = tx.numel() / (t * d_in);
        let mut out_shape = tx.shape().to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = t_out;
        out_shape[r - 1] = d_out;
        let mut out = Tensor::zeros(out_shape);
        {
            let (xv, wv, bv, ov) = (tx.data(), tw.data(), tb.data(), out.data_mut());
            for bi in 0..batch {
                let xb = &xv[bi * t * d_in..(bi + 1) * t * d_in];
                let ob = &mut ov[bi * t_out * d_out..(bi + 1) * t_out * d_out];
                for to in 0..t_out {
                    let orow = &mut ob[to * d_out..(to + 1) * d_out];
                    orow.copy_from_slice(bv);
                    for i in 0..k {
                        let ti = (to * stride + i) as isize - pad_left as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let xrow = &xb[ti as usize * d_in..(ti as usize + 1) * d_in];
                        for (di, &xvv) in xrow.iter().enumerate() {
                            let wrow = &wv[(i * d_in + di) * d_out..(i * d_in + di + 1) * d_out];
                            for (o, &wvv) in orow.iter_mut().zip(wrow) {
                                *o += xvv * wvv;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            "conv1d",
            out,
            Op::Conv1d { x, w, b, stride, pad_left },
            needs,
        )
    }

    /// Normalization over the last axis with per-feature gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let eps = S::from_f64(LN_EPS);
        let inv_d = S::ONE / S::from_f64(d as f64);
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mut mean = S::ZERO;
            for v in row.iter() {
                mean += *v;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for v in row.iter() {
                let c = *v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv = S::ONE / (var + eps).sqrt();
            for (v, (&g, &b)) in row.iter_mut().zip(tg.data().iter().zip(tb.data())) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta }, needs)
    }

    /// Softmax of `x / temp` over the last axis. `temp` must be positive.
    pub fn row_softmax(&mut self, a: NodeId, temp: S) -> Result<NodeId> {
        if !(temp > S::ZERO) || !temp.is_finite_s() {
            return Err(TensorError::BadParam {
                op: "row_softmax",
                detail: format!("temperature {temp} is not positive"),
            });
        }
        let out = crate::tensor::row_softmax_value(self.value(a), temp);
        let needs = self.needs(a);
        self.push("row_softmax", out, Op::RowSoftmax { a, temp }, needs)
    }

    /// Pick index `index` of the second-to-last axis: `[.., T, d] -> [.., d]`.
    pub fn select_time(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() < 2 {
            return Err(TensorError::BadShape {
                op: "select_time",
                shape: ta.shape().to_vec(),
                detail: "needs rank >= 2".into(),
            });
        }
        let d = ta.last_dim();
        let t = ta.shape()[ta.rank() - 2];
        if index >= t {
            return Err(TensorError::BadParam {
                op: "select_time",
                detail: format!("index {index} out of range for length {t}"),
            });
        }
        let batch = ta.numel() / (t * d);
        let mut shape = ta.shape().to_vec();
        shape.remove(shape.len() - 2);
        let mut out = Tensor::zeros(shape);
        for bi in 0..batch {
            let src = &ta.data()[(bi * t + index) * d..(bi * t + index + 1) * d];
            out.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(src);
        }
        let needs = self.needs(a);
        self.push("select_time", out, Op::SelectTime { a, index }, needs)
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let d = ta.last_dim();
        if len == 0 || start + len > d {
            return Err(TensorError::BadParam {
                op: "slice_last",
                detail: format!("columns [{start}, {}) out of range for width {d}", start + len),
            });
        }
        let rows = ta.leading();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut out = Tensor::zeros(shape);
        for r in 0..rows {
            let src = &ta.data()[r * d + start..r * d + start + len];
            out.data_mut()[r * len..(r + 1) * len].copy_from_slice(src);
        }
        let needs = self.needs(a);
        self.push("slice_last", out, Op::SliceLast { a, start }, needs)
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::BadParam {
                op: "concat_last",
                detail: "no parts".into(),
            });
        }
        let lead_shape = self.value(parts[0]).shape()[..self.value(parts[0]).rank() - 1].to_vec();
        let mut total = 0usize;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape()[..tp.rank() - 1] != lead_shape[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            total += tp.last_dim();
        }
        let rows: usize = lead_shape.iter().product();
        let mut shape = lead_shape;
        shape.push(total);
        let mut out = Tensor::zeros(shape);
        {
            let ov = out.data_mut();
            let mut col = 0usize;
            for &p in parts {
                let tp = &self.nodes[p.0].value;
                let d = tp.last_dim();
                for r in 0..rows {
                    ov[r * total + col..r * total + col + d]
                        .copy_from_slice(&tp.data()[r * d..(r + 1) * d]);
                }
                col += d;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_last", out, Op::ConcatLast { parts: parts.to_vec() }, needs)
    }

    /// Mean over the second-to-last axis: `[.., T, d] -> [.., d]`.
    pub fn mean_time(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() < 2 {
            return Err(TensorError::BadShape {
                op: "mean_time",
                shape: ta.shape().to_vec(),
                detail: "needs rank >= 2".into(),
            });
        }
        let d = ta.last_dim();
        let t = ta.shape()[ta.rank() - 2];
        let batch = ta.numel() / (t * d);
        let inv = S::ONE / S::from_f64(t as f64);
        let mut shape = ta.shape().to_vec();
        shape.remove(shape.len() - 2);
        let mut out = Tensor::zeros(shape);
        for bi in 0..batch {
            let ob = &mut out.data_mut()[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let src = &ta.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &v) in ob.iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
        let needs = self.needs(a);
        self.push("mean_time", out, Op::MeanTime { a }, needs)
    }

    /// Unit-normalize rows (last axis) with a 1e-12 floor under the root.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let d = ta.last_dim();
        let eps = S::from_f64(1e-12);
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mut s2 = eps;
            for v in row.iter() {
                s2 += *v * *v;
            }
            let inv = S::ONE / s2.sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let needs = self.needs(a);
        self.push("l2_normalize", out, Op::L2Normalize { a }, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = S::ZERO;
        for &v in self.value(a).data() {
            s += v;
        }
        let needs = self.needs(a);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { a }, needs)
    }

    /// Clamp rows at zero, add `floor`, divide by the row sum. Output rows
    /// are stochastic whenever the input row has any mass.
    pub fn row_renorm(&mut self, a: NodeId, floor: S) -> Result<NodeId> {
        if !(floor > S::ZERO) {
            return Err(TensorError::BadParam {
                op: "row_renorm",
                detail: format!("floor {floor} is not positive"),
            });
        }
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mut s = S::ZERO;
            for v in row.iter_mut() {
                *v = v.maxs(S::ZERO) + floor;
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let needs = self.needs(a);
        self.push("row_renorm", out, Op::RowRenorm { a, floor }, needs)
    }

    /// Mean over `B` rows of `-log softmax(logits)[label]`, computed with
    /// max-subtraction so huge logits stay finite.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let tl = self.value(logits);
        if tl.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                shape: tl.shape().to_vec(),
                detail: "logits must be [batch, classes]".into(),
            });
        }
        let (b, c) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != b {
            return Err(TensorError::BadParam {
                op: "cross_entropy",
                detail: format!("{} labels for batch {b}", labels.len()),
            });
        }
        for &lab in labels {
            if lab >= c {
                return Err(TensorError::BadLabel { label: lab, classes: c });
            }
        }
        let mut total = S::ZERO;
        for (bi, &lab) in labels.iter().enumerate() {
            let row = &tl.data()[bi * c..(bi + 1) * c];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maxs(v);
            }
            let mut z = S::ZERO;
            for &v in row {
                z += (v - mx).exp();
            }
            total += mx + z.ln() - row[lab];
        }
        total /= S::from_f64(b as f64);
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            needs,
        )
    }

    /// Elementwise mean of same-shaped nodes, built from add/scale.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        self.scale(acc, S::ONE / S::from_f64(parts.len() as f64))
    }

    // ---- backward ----------------------------------------------------------

    /// One reverse sweep from a scalar loss. Nodes unreachable from a
    /// grad-requiring leaf are skipped entirely.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::BadShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                detail: "loss must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(S::ONE));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backward_op(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, update: impl FnOnce(&mut Tensor<S>)) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
        }
        update(slot.as_mut().unwrap());
    }

    fn backward_op(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    self.accum(grads, *p, |t| {
                        for (o, &v) in t.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
            }
            Op::AddBroadcast { a, b } => {
                self.accum(grads, *a, |t| {
                    for (o, &v) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                });
                let block = self.value(*b).numel();
                self.accum(grads, *b, |t| {
                    for chunk in g.data().chunks(block) {
                        for (o, &v) in t.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |t| {
                    for ((o, &gv), &bv) in t.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                self.accum(grads, *b, |t| {
                    for ((o, &gv), &av) in t.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(grads, *a, |t| {
                    for (o, &v) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += v * c;
                    }
                });
            }
            Op::AddConst { a } => {
                self.accum(grads, *a, |t| {
                    for (o, &v) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                });
            }
            Op::MatMul { a, b } => self.backward_matmul(*a, *b, g, grads),
            Op::Transpose { a } => {
                let gt = transpose_value(g);
                self.accum(grads, *a, |t| {
                    for (o, &v) in t.data_mut().iter_mut().zip(gt.data()) {
                        *o += v;
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad_left } => {
                self.backward_conv(*x, *w, *b, *stride, *pad_left, &node.value, g, grads)
            }
            Op::Relu { a } => {
                let ta = self.value(*a);
                self.accum(grads, *a, |t| {
                    for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        if xv > S::ZERO {
                            *o += gv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                self.backward_layer_norm(*x, *gamma, *beta, g, grads)
            }
            Op::RowSoftmax { a, temp } => {
                let y = &node.value;
                let d = y.last_dim();
                let inv_t = S::ONE / *temp;
                self.accum(grads, *a, |t| {
                    for (r, (trow, (yrow, grow))) in t
                        .data_mut()
                        .chunks_mut(d)
                        .zip(y.data().chunks(d).zip(g.data().chunks(d)))
                        .enumerate()
                    {
                        let _ = r;
                        let mut s = S::ZERO;
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            s += yv * gv;
                        }
                        for (o, (&yv, &gv)) in trow.iter_mut().zip(yrow.iter().zip(grow)) {
                            *o += yv * (gv - s) * inv_t;
                        }
                    }
                });
            }
            Op::SelectTime { a, index } => {
                let ta = self.value(*a);
                let d = ta.last_dim();
                let t_len = ta.shape()[ta.rank() - 2];
                let batch = ta.numel() / (t_len * d);
                let index = *index;
                self.accum(grads, *a, |t| {
                    for bi in 0..batch {
                        let dst = &mut t.data_mut()[(bi * t_len + index) * d..(bi * t_len + index + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(&g.data()[bi * d..(bi + 1) * d]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceLast { a, start } => {
                let ta = self.value(*a);
                let d = ta.last_dim();
                let len = node.value.last_dim();
                let rows = ta.leading();
                let start = *start;
                self.accum(grads, *a, |t| {
                    for r in 0..rows {
                        let dst = &mut t.data_mut()[r * d + start..r * d + start + len];
                        for (o, &v) in dst.iter_mut().zip(&g.data()[r * len..(r + 1) * len]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.leading();
                let mut col = 0usize;
                for &p in parts {
                    let d = self.value(p).last_dim();
                    self.accum(grads, p, |t| {
                        for r in 0..rows {
                            let src = &g.data()[r * total + col..r * total + col + d];
                            for (o, &v) in t.data_mut()[r * d..(r + 1) * d].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                    col += d;
                }
            }
            Op::MeanTime { a } => {
                let ta = self.value(*a);
                let d = ta.last_dim();
                let t_len = ta.shape()[ta.rank() - 2];
                let batch = ta.numel() / (t_len * d);
                let inv = S::ONE / S::from_f64(t_len as f64);
                self.accum(grads, *a, |t| {
                    for bi in 0..batch {
                        let grow = &g.data()[bi * d..(bi + 1) * d];
                        for ti in 0..t_len {
                            let dst = &mut t.data_mut()[(bi * t_len + ti) * d..(bi * t_len + ti + 1) * d];
                            for (o, &v) in dst.iter_mut().zip(grow) {
                                *o += v * inv;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { a } => {
                let ta = self.value(*a);
                let y = &node.value;
                let d = y.last_dim();
                let eps = S::from_f64(1e-12);
                self.accum(grads, *a, |t| {
                    for ((trow, xrow), (yrow, grow)) in t
                        .data_mut()
                        .chunks_mut(d)
                        .zip(ta.data().chunks(d))
                        .zip(y.data().chunks(d).zip(g.data().chunks(d)))
                    {
                        let mut s2 = eps;
                        for &xv in xrow {
                            s2 += xv * xv;
                        }
                        let inv = S::ONE / s2.sqrt();
                        let mut dot = S::ZERO;
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot += yv * gv;
                        }
                        for (o, (&yv, &gv)) in trow.iter_mut().zip(yrow.iter().zip(grow)) {
                            *o += (gv - yv * dot) * inv;
                        }
                    }
                });
            }
            Op::Ln { a } => {
                let ta = self.value(*a);
                self.accum(grads, *a, |t| {
                    for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv / xv;
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g.data()[0];
                self.accum(grads, *a, |t| {
                    for o in t.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::RowRenorm { a, floor } => {
                let ta = self.value(*a);
                let y = &node.value;
                let d = y.last_dim();
                let floor = *floor;
                self.accum(grads, *a, |t| {
                    for ((trow, xrow), (yrow, grow)) in t
                        .data_mut()
                        .chunks_mut(d)
                        .zip(ta.data().chunks(d))
                        .zip(y.data().chunks(d).zip(g.data().chunks(d)))
                    {
                        let mut s = S::ZERO;
                        for &xv in xrow {
                            s += xv.maxs(S::ZERO) + floor;
                        }
                        let mut dot = S::ZERO;
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot += yv * gv;
                        }
                        for (o, (&xv, &gv)) in trow.iter_mut().zip(xrow.iter().zip(grow)) {
                            if xv > S::ZERO {
                                *o += (gv - dot) / s;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let (b, c) = (tl.shape()[0], tl.shape()[1]);
                let gv = g.data()[0] / S::from_f64(b as f64);
                self.accum(grads, *logits, |t| {
                    for (bi, &lab) in labels.iter().enumerate() {
                        let row = &tl.data()[bi * c..(bi + 1) * c];
                        let mut mx = row[0];
                        for &v in row {
                            mx = mx.maxs(v);
                        }
                        let mut z = S::ZERO;
                        for &v in row {
                            z += (v - mx).exp();
                        }
                        let dst = &mut t.data_mut()[bi * c..(bi + 1) * c];
                        for (j, (o, &v)) in dst.iter_mut().zip(row).enumerate() {
                            let p = (v - mx).exp() / z;
                            let ind = if j == lab { S::ONE } else { S::ZERO };
                            *o += gv * (p - ind);
                        }
                    }
                });
            }
        }
    }

    fn backward_matmul(&self, a: NodeId, b: NodeId, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, rb) = (ta.rank(), tb.rank());
        let k = ta.last_dim();
        let n = tb.last_dim();
        if rb == 2 {
            // Shared right operand; flatten all leading axes of `a`.
            let rows = ta.leading();
            self.accum(grads, a, |t| {
                mm_nt(g.data(), rows, n, tb.data(), k, t.data_mut());
            });
            self.accum(grads, b, |t| {
                mm_tn(ta.data(), rows, k, g.data(), n, t.data_mut());
            });
        } else if ra == 2 {
            // Shared left operand against batched right.
            let m = ta.shape()[0];
            let batches = tb.numel() / (k * n);
            self.accum(grads, a, |t| {
                for bi in 0..batches {
                    mm_nt(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        m,
                        n,
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        k,
                        t.data_mut(),
                    );
                }
            });
            self.accum(grads, b, |t| {
                for bi in 0..batches {
                    mm_tn(
                        ta.data(),
                        m,
                        k,
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        n,
                        &mut t.data_mut()[bi * k * n..(bi + 1) * k * n],
                    );
                }
            });
        } else {
            let m = ta.shape()[ra - 2];
            let batches = ta.numel() / (m * k);
            self.accum(grads, a, |t| {
                for bi in 0..batches {
                    mm_nt(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        m,
                        n,
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        k,
                        &mut t.data_mut()[bi * m * k..(bi + 1) * m * k],
                    );
                }
            });
            self.accum(grads, b, |t| {
                for bi in 0..batches {
                    mm_tn(
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        n,
                        &mut t.data_mut()[bi * k * n..(bi + 1) * k * n],
                    );
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad_left: usize,
        out: &Tensor<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let d_in = tx.last_dim();
        let t = tx.shape()[tx.rank() - 2];
        let (k, d_out) = (tw.shape()[0], tw.shape()[2]);
        let t_out = out.shape()[out.rank() - 2];
        let batch = tx.numel() / (t * d_in);

        self.accum(grads, b, |tg| {
            for grow in g.data().chunks(d_out) {
                for (o, &v) in tg.data_mut().iter_mut().zip(grow) {
                    *o += v;
                }
            }
        });
        self.accum(grads, w, |tg| {
            for bi in 0..batch {
                for to in 0..t_out {
                    let grow = &g.data()[(bi * t_out + to) * d_out..(bi * t_out + to + 1) * d_out];
                    for i in 0..k {
                        let ti = (to * stride + i) as isize - pad_left as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let xrow = &tx.data()[(bi * t + ti as usize) * d_in..(bi * t + ti as usize + 1) * d_in];
                        for (di, &xv) in xrow.iter().enumerate() {
                            let dst = &mut tg.data_mut()[(i * d_in + di) * d_out..(i * d_in + di + 1) * d_out];
                            for (o, &gv) in dst.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
            }
        });
        self.accum(grads, x, |tg| {
            for bi in 0..batch {
                for to in 0..t_out {
                    let grow = &g.data()[(bi * t_out + to) * d_out..(bi * t_out + to + 1) * d_out];
                    for i in 0..k {
                        let ti = (to * stride + i) as isize - pad_left as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let dst = &mut tg.data_mut()[(bi * t + ti as usize) * d_in..(bi * t + ti as usize + 1) * d_in];
                        for (di, o) in dst.iter_mut().enumerate() {
                            let wrow = &tw.data()[(i * d_in + di) * d_out..(i * d_in + di + 1) * d_out];
                            let mut s = S::ZERO;
                            for (&gv, &wv) in grow.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            *o += s;
                        }
                    }
                }
            }
        });
    }

    fn backward_layer_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (tx, tg) = (self.value(x), self.value(gamma));
        let d = tx.last_dim();
        let eps = S::from_f64(LN_EPS);
        let inv_d = S::ONE / S::from_f64(d as f64);
        // Recompute row statistics; cheaper than caching them on the node.
        let row_stats = |xrow: &[S]| -> (S, S) {
            let mut mean = S::ZERO;
            for &v in xrow {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for &v in xrow {
                let c = v - mean;
                var += c * c;
            }
            (mean, S::ONE / (var * inv_d + eps).sqrt())
        };
        self.accum(grads, x, |t| {
            for ((trow, xrow), grow) in t
                .data_mut()
                .chunks_mut(d)
                .zip(tx.data().chunks(d))
                .zip(g.data().chunks(d))
            {
                let (mean, inv) = row_stats(xrow);
                let mut m1 = S::ZERO;
                let mut m2 = S::ZERO;
                for ((&gv, &gam), &xv) in grow.iter().zip(tg.data()).zip(xrow) {
                    let gh = gv * gam;
                    m1 += gh;
                    m2 += gh * (xv - mean) * inv;
                }
                m1 *= inv_d;
                m2 *= inv_d;
                for ((o, (&gv, &gam)), &xv) in trow.iter_mut().zip(grow.iter().zip(tg.data())).zip(xrow) {
                    let xh = (xv - mean) * inv;
                    *o += (gv * gam - m1 - xh * m2) * inv;
                }
            }
        });
        self.accum(grads, gamma, |t| {
            for (xrow, grow) in tx.data().chunks(d).zip(g.data().chunks(d)) {
                let (mean, inv) = row_stats(xrow);
                for ((o, &gv), &xv) in t.data_mut().iter_mut().zip(grow).zip(xrow) {
                    *o += gv * (xv - mean) * inv;
                }
            }
        });
        self.accum(grads, beta, |t| {
            for grow in g.data().chunks(d) {
                for (o, &gv) in t.data_mut().iter_mut().zip(grow) {
                    *o += gv;
                }
            }
        });
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn transpose_value<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let r = t.rank();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.numel() / (m * n);
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    let mut out = Tensor::zeros(shape);
    for bi in 0..batch {
        let src = &t.data()[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out.data_mut()[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn matmul_value<S: Scalar>(ta: &Tensor<S>, tb: &Tensor<S>) -> Result<Tensor<S>> {
    let (ra, rb) = (ta.rank(), tb.rank());
    if ra < 2 || rb < 2 {
        return Err(TensorError::BadShape {
            op: "matmul",
            shape: ta.shape().to_vec(),
            detail: "both operands need rank >= 2".into(),
        });
    }
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: ta.shape().to_vec(),
        rhs: tb.shape().to_vec(),
    };
    let k = ta.last_dim();
    let m = ta.shape()[ra - 2];
    let n = tb.last_dim();
    if tb.shape()[rb - 2] != k {
        return Err(mismatch());
    }
    if rb == 2 {
        let rows = ta.leading();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(shape);
        mm_nn(ta.data(), rows, k, tb.data(), n, out.data_mut());
        Ok(out)
    } else if ra == 2 {
        let batches = tb.numel() / (k * n);
        let mut shape = tb.shape().to_vec();
        shape[rb - 2] = m;
        let mut out = Tensor::zeros(shape);
        for bi in 0..batches {
            mm_nn(
                ta.data(),
                m,
                k,
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                n,
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
            );
        }
        Ok(out)
    } else {
        if ta.shape()[..ra - 2] != tb.shape()[..rb - 2] {
            return Err(mismatch());
        }
        let batches = ta.numel() / (m * k);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(shape);
        for bi in 0..batches {
            mm_nn(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                m,
                k,
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                n,
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
            );
        }
        Ok(out)
    }
}
