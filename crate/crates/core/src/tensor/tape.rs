//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`] in evaluation order, so the
//! node list is already topologically sorted. [`Tape::backward`] walks it in
//! exact reverse, applying each node's local gradient rule. A tape is single
//! use: once backward has run it refuses to run again, and a new forward pass
//! needs a new tape.

use std::sync::Arc;

use super::dense::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Shared index list (edge endpoints, segment ids, row selections).
pub type Index = Arc<[usize]>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norms below this are treated as zero by the cosine distance.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Scale(TensorId, f64),
    ScaleRows(TensorId, TensorId),
    Reshape(TensorId),
    SliceCols { x: TensorId, start: usize },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    GatherRows { x: TensorId, index: Index },
    ScatterAddRows { x: TensorId, index: Index },
    SegmentSoftmax { x: TensorId, segments: Index },
    LeakyRelu { x: TensorId, slope: f64 },
    Elu(TensorId),
    Tanh(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowCosineDistance(TensorId, TensorId),
    CrossEntropy { logits: TensorId, label: usize, probs: Vec<f64> },
    Sum(TensorId),
    Mean(TensorId),
    OverwriteRows { x: TensorId, rows: Index, token: TensorId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::Reshape(..) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Elu(..) => "elu",
            Op::Tanh(..) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RowCosineDistance(..) => "row_cosine_distance",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::OverwriteRows { .. } => "overwrite_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`; `None` if the loss does not depend on it.
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable tensors.
    pub fn get_or_zeros(&self, id: TensorId, tape: &Tape) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[TensorId]) -> Result<TensorId> {
        if self.backward_done {
            return Err(Error::Tape("cannot record after backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn mat_dims(&self, id: TensorId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.mat_dims(x);
        let vb = self.value(bias);
        if vb.numel() != d {
            return Err(Error::shape("add_bias", format!("{n}x{d} + [{}]", vb.numel())));
        }
        let mut out = self.value(x).clone();
        let b = vb.data().to_vec();
        for i in 0..n {
            for (o, bj) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bj;
            }
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Multiplies row `e` of `x[E×k]` by `weights[e]`.
    pub fn scale_rows(&mut self, x: TensorId, weights: TensorId) -> Result<TensorId> {
        let (e, k) = self.mat_dims(x);
        let w = self.value(weights);
        if w.numel() != e {
            return Err(Error::shape("scale_rows", format!("{e}x{k} by [{}]", w.numel())));
        }
        let w = w.data().to_vec();
        let mut out = self.value(x).clone();
        for (i, wi) in w.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= wi;
            }
        }
        self.push(out, Op::ScaleRows(x, weights), &[x, weights])
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.mat_dims(x);
        if start + len > d {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {d}", start + len)));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        self.push(Tensor::matrix(n, len, data)?, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let n = parts
            .first()
            .map(|&p| self.mat_dims(p).0)
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.mat_dims(p).1).collect();
        if parts.iter().any(|&p| self.mat_dims(p).0 != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::matrix(n, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Stacks row blocks; rank-1 inputs count as single rows.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let d = parts
            .first()
            .map(|&p| self.mat_dims(p).1)
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if parts.iter().any(|&p| self.mat_dims(p).1 != d) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len() / d.max(1);
        self.push(
            Tensor::matrix(n, d, data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// `out[e] = x[index[e]]`
    pub fn gather_rows(&mut self, x: TensorId, index: Index) -> Result<TensorId> {
        let (n, d) = self.mat_dims(x);
        let v = self.value(x);
        let mut data = Vec::with_capacity(index.len() * d);
        for &r in index.iter() {
            if r >= n {
                return Err(Error::Index(format!("gather_rows: row {r} of {n}")));
            }
            data.extend_from_slice(v.row(r));
        }
        let out = Tensor::matrix(index.len(), d, data)?;
        self.push(out, Op::GatherRows { x, index }, &[x])
    }

    /// `out[index[e]] += x[e]` into `rows` output rows.
    pub fn scatter_add_rows(&mut self, x: TensorId, index: Index, rows: usize) -> Result<TensorId> {
        let (e, d) = self.mat_dims(x);
        if index.len() != e {
            return Err(Error::shape("scatter_add_rows", format!("{e} rows, {} ids", index.len())));
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(&[rows, d]);
        for (i, &r) in index.iter().enumerate() {
            if r >= rows {
                return Err(Error::Index(format!("scatter_add_rows: row {r} of {rows}")));
            }
            for (o, xv) in out.row_mut(r).iter_mut().zip(v.row(i)) {
                *o += xv;
            }
        }
        self.push(out, Op::ScatterAddRows { x, index }, &[x])
    }

    /// Softmax within groups of entries sharing a segment id.
    ///
    /// Each segment is shifted by its own maximum before exponentiation.
    pub fn segment_softmax(&mut self, x: TensorId, segments: Index) -> Result<TensorId> {
        let v = self.value(x);
        if segments.len() != v.numel() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} logits, {} segment ids", v.numel(), segments.len()),
            ));
        }
        let out = Tensor::new(v.shape().to_vec(), segment_softmax_values(v.data(), &segments))?;
        self.push(out, Op::SegmentSoftmax { x, segments }, &[x])
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(out, Op::Elu(x), &[x])
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Row-wise `gain ⊙ (x − mean) / sqrt(var + eps) + bias`, variance over `1/d`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (n, d) = self.mat_dims(x);
        if d == 0 || eps <= 0.0 {
            return Err(Error::Argument(format!("layer_norm needs d ≥ 1 and eps > 0 (d={d}, eps={eps})")));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("{n}x{d} with gain [{}], bias [{}]", g.numel(), b.numel()),
            ));
        }
        let v = self.value(x);
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[i] = r;
            for j in 0..d {
                let xh = (row[j] - mean) * r;
                normalized[i * d + j] = xh;
                out[i * d + j] = g.data()[j] * xh + b.data()[j];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Per-row `1 − a·b / (‖a‖‖b‖)`, returned as a length-n vector.
    ///
    /// Rows where either norm is below [`COSINE_NORM_FLOOR`] get distance 1
    /// and no gradient.
    pub fn row_cosine_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(Error::shape(
                "row_cosine_distance",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out: Vec<f64> = (0..va.rows())
            .map(|i| cosine_terms(va.row(i), vb.row(i)).map_or(1.0, |t| 1.0 - t.cos()))
            .collect();
        self.push(Tensor::vector(out), Op::RowCosineDistance(a, b), &[a, b])
    }

    /// `−log softmax(logits)[label]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let v = self.value(logits);
        let c = v.numel();
        if label >= c {
            return Err(Error::Index(format!("label {label} with {c} classes")));
        }
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - v.data()[label];
        let probs = exps.iter().map(|e| e / total).collect();
        self.push(
            Tensor::scalar(loss.max(0.0)),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Copy of `x[n×d]` with the listed rows replaced by `token[d]`.
    pub fn overwrite_rows(&mut self, x: TensorId, rows: Index, token: TensorId) -> Result<TensorId> {
        let (n, d) = self.mat_dims(x);
        let t = self.value(token);
        if t.numel() != d {
            return Err(Error::shape("overwrite_rows", format!("token [{}] for width {d}", t.numel())));
        }
        let mut seen = vec![false; n];
        for &r in rows.iter() {
            if r >= n {
                return Err(Error::Index(format!("overwrite_rows: row {r} of {n}")));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::Argument(format!("overwrite_rows: row {r} repeated")));
            }
        }
        let tok = t.data().to_vec();
        let mut out = self.value(x).clone();
        for &r in rows.iter() {
            out.row_mut(r).copy_from_slice(&tok);
        }
        self.push(out, Op::OverwriteRows { x, rows, token }, &[x, token])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut visit_order = Vec::new();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visit_order.push(i);
            self.local_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visit_order })
    }

    fn local_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[id.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(n.value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.value(*b).cols();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| gemm_nt(gd, vb, ga, m, k, n));
                acc(*b, &mut |gb| gemm_tn(va, gd, gb, m, k, n));
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    acc(id, &mut |gx| add_into(gx, gd));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(gd).zip(vb) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(gd).zip(va) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let d = self.value(*b).numel();
                acc(*x, &mut |gx| add_into(gx, gd));
                acc(*b, &mut |gb| {
                    for row in gd.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(gd) {
                    *o += c * gv;
                }
            }),
            Op::ScaleRows(x, w) => {
                let k = self.value(*x).cols();
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |gx| {
                    for (e, wv) in vw.iter().enumerate() {
                        for j in 0..k {
                            gx[e * k + j] += gd[e * k + j] * wv;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (e, o) in gw.iter_mut().enumerate() {
                        let r = e * k..(e + 1) * k;
                        *o += dot(&gd[r.clone()], &vx[r]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, gd)),
            Op::SliceCols { x, start } => {
                let d = self.value(*x).cols();
                let len = g.cols();
                acc(*x, &mut |gx| {
                    for (i, row) in gd.chunks(len.max(1)).enumerate() {
                        add_into(&mut gx[i * d + start..i * d + start + len], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for (i, row) in gp.chunks_mut(w.max(1)).enumerate() {
                            add_into(row, &gd[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |gp| add_into(gp, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let d = g.cols();
                acc(*x, &mut |gx| {
                    for (e, &r) in index.iter().enumerate() {
                        add_into(&mut gx[r * d..(r + 1) * d], &gd[e * d..(e + 1) * d]);
                    }
                });
            }
            Op::ScatterAddRows { x, index } => {
                let d = g.cols();
                acc(*x, &mut |gx| {
                    for (e, &r) in index.iter().enumerate() {
                        add_into(&mut gx[e * d..(e + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = node.value.data();
                let nseg = segments.iter().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; nseg];
                for (e, &s) in segments.iter().enumerate() {
                    dots[s] += gd[e] * y[e];
                }
                acc(*x, &mut |gx| {
                    for (e, &s) in segments.iter().enumerate() {
                        gx[e] += y[e] * (gd[e] - dots[s]);
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, gv), xv) in gx.iter_mut().zip(gd).zip(vx) {
                        *o += if *xv > 0.0 { *gv } else { slope * gv };
                    }
                });
            }
            Op::Elu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, gv), xv) in gx.iter_mut().zip(gd).zip(vx) {
                        *o += if *xv > 0.0 { *gv } else { gv * xv.exp() };
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((o, gv), yv) in gx.iter_mut().zip(gd).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gain_v = self.value(*gain).data();
                acc(*gain, &mut |gg| {
                    for (grow, xrow) in gd.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in gd.chunks(d) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxh = vec![0.0; d];
                    for (i, r) in inv_std.iter().enumerate() {
                        let grow = &gd[i * d..(i + 1) * d];
                        let xh = &normalized[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxh[j] = grow[j] * gain_v[j];
                        }
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh = dot(&dxh, xh) / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += r * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::RowCosineDistance(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                let terms: Vec<Option<CosineTerms>> = (0..va.rows())
                    .map(|i| cosine_terms(va.row(i), vb.row(i)))
                    .collect();
                acc(*a, &mut |ga| {
                    for (i, t) in terms.iter().enumerate() {
                        if let Some(t) = t {
                            t.grad_first(va.row(i), vb.row(i), gd[i], &mut ga[i * d..(i + 1) * d]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, t) in terms.iter().enumerate() {
                        if let Some(t) = t {
                            t.swapped()
                                .grad_first(vb.row(i), va.row(i), gd[i], &mut gb[i * d..(i + 1) * d]);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let gv = gd[0];
                acc(*logits, &mut |gl| {
                    for (c, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let y = if c == *label { 1.0 } else { 0.0 };
                        *o += gv * (p - y);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += gd[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let s = gd[0] / gx.len() as f64;
                for o in gx.iter_mut() {
                    *o += s;
                }
            }),
            Op::OverwriteRows { x, rows, token } => {
                let d = g.cols();
                acc(*x, &mut |gx| {
                    add_into(gx, gd);
                    for &r in rows.iter() {
                        for j in 0..d {
                            gx[r * d + j] -= gd[r * d + j];
                        }
                    }
                });
                acc(*token, &mut |gt| {
                    for &r in rows.iter() {
                        add_into(gt, &gd[r * d..(r + 1) * d]);
                    }
                });
            }
        }
    }
}

fn segment_softmax_values(logits: &[f64], segments: &[usize]) -> Vec<f64> {
    let nseg = segments.iter().max().map_or(0, |m| m + 1);
    let mut seg_max = vec![f64::NEG_INFINITY; nseg];
    for (&x, &s) in logits.iter().zip(segments) {
        seg_max[s] = seg_max[s].max(x);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(segments)
        .map(|(&x, &s)| (x - seg_max[s]).exp())
        .collect();
    let mut seg_sum = vec![0.0; nseg];
    for (&e, &s) in out.iter().zip(segments) {
        seg_sum[s] += e;
    }
    for (o, &s) in out.iter_mut().zip(segments) {
        *o /= seg_sum[s];
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct CosineTerms {
    dot: f64,
    norm_a: f64,
    norm_b: f64,
}

impl CosineTerms {
    fn cos(&self) -> f64 {
        (self.dot / (self.norm_a * self.norm_b)).clamp(-1.0, 1.0)
    }

    fn swapped(self) -> Self {
        Self {
            norm_a: self.norm_b,
            norm_b: self.norm_a,
            ..self
        }
    }

    /// Accumulates `upstream · ∂(1 − cos)/∂a` into `out`.
    fn grad_first(&self, a: &[f64], b: &[f64], upstream: f64, out: &mut [f64]) {
        let nn = self.norm_a * self.norm_b;
        let coef_a = self.dot / (self.norm_a * self.norm_a * nn);
        for ((o, av), bv) in out.iter_mut().zip(a).zip(b) {
            *o -= upstream * (bv / nn - coef_a * av);
        }
    }
}

fn cosine_terms(a: &[f64], b: &[f64]) -> Option<CosineTerms> {
    let norm_a = dot(a, a).sqrt();
    let norm_b = dot(b, b).sqrt();
    if norm_a < COSINE_NORM_FLOOR || norm_b < COSINE_NORM_FLOOR {
        return None;
    }
    Some(CosineTerms {
        dot: dot(a, b),
        norm_a,
        norm_b,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
