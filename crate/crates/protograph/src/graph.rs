//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as it executes. Nodes only reference
//! earlier nodes, so the tape order is already topological and the backward
//! sweep is a single reverse pass. One graph is built per episode and
//! mutated by exactly one thread; tensors and parameter stores are plain
//! values that can move freely between threads.
//!
//! Layout convention: the last axis is the channel/feature axis. Images are
//! `[H,W,C]` or batched `[B,H,W,C]`, node matrices are `[n,d]`.

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Rsqrt(NodeId),
    Recip(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        geom: ConvGeom,
        /// im2col patches saved by the forward pass; empty when no gradient
        /// will be requested.
        col: Vec<f64>,
    },
    /// [..., C] -> [C], mean over all leading axes.
    MeanRows(NodeId),
    /// [C] -> [leading..., C].
    BroadcastRows(NodeId),
    /// [B, ..., C] -> [B, C], mean over the middle axes of each batch entry.
    MeanInner(NodeId),
    /// [B, C] -> [B, middle..., C].
    BroadcastInner(NodeId),
    /// x - m broadcast over the middle axes: x is [B,...,C], m is [B,C].
    SubInner(NodeId, NodeId),
    /// x * m broadcast over the middle axes.
    MulInner(NodeId, NodeId),
    /// Per-batch-entry mean of squares: [B,...,C] -> [B,C].
    MeanInnerSq(NodeId),
    /// x * v / x + v / x - v with v per channel: x is [...,C], v is [C].
    MulChannels(NodeId, NodeId),
    AddChannels(NodeId, NodeId),
    SubChannels(NodeId, NodeId),
    /// [n, m] -> [n], sum over the last axis.
    RowSums(NodeId),
    /// Row-wise scaling of [n, m] by [n].
    ScaleRows(NodeId, NodeId),
    /// Concatenation along the last axis.
    Concat(NodeId, NodeId),
    /// Stacking along the first axis.
    ConcatRows(Vec<NodeId>),
    TakeRow(NodeId, usize),
    TakeRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    /// [n, d] -> [n, n, d] of pairwise differences x_i - x_j.
    PairwiseDiff(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A recorded computation. Dropping the graph releases all intermediates.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a differentiable leaf; its gradient is available after
    /// [`Graph::backward`].
    pub fn parameter(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. this node, if backward has run and the
    /// node required a gradient.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::BadShape(format!(
                "{what}: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn abs_val(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x.abs()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// 1/sqrt(x); inputs must be positive.
    pub fn rsqrt(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| 1.0 / x.sqrt()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Rsqrt(a), rg)
    }

    /// 1/x; inputs must be nonzero.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| 1.0 / x).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Recip(a), rg)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::BadShape(format!(
                "matmul: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Affine map. `x` may be a vector `[d]` or a row matrix `[n,d]`;
    /// `weight` is `[d,o]`, `bias` (optional) is `[o]`. A vector input yields
    /// a vector output.
    pub fn linear(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 2 {
            return Err(TensorError::BadShape(format!("linear: weight {ws:?}")));
        }
        let was_vector = xs.len() == 1;
        if xs.last() != Some(&ws[0]) || xs.len() > 2 {
            return Err(TensorError::BadShape(format!(
                "linear: input {xs:?} vs weight {ws:?}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [ws[1]] {
                return Err(TensorError::BadShape(format!(
                    "linear: bias {bs:?} vs weight {ws:?}"
                )));
            }
        }
        let rows = if was_vector { 1 } else { xs[0] };
        let xm = if was_vector { self.reshape(x, vec![1, ws[0]])? } else { x };
        let mut y = self.matmul(xm, weight)?;
        if let Some(b) = bias {
            let bb = self.broadcast_rows(b, &[rows])?;
            y = self.add(y, bb)?;
        }
        if was_vector {
            y = self.reshape(y, vec![ws[1]])?;
        }
        Ok(y)
    }

    /// Cross-correlation. `input` is `[H,W,C]` or `[B,H,W,C]`; `kernels` is
    /// `[kh,kw,cin,cout]`. Output rank matches the input rank.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels_id: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernels_id).shape().to_vec();
        if kshape.len() != 4 {
            return Err(TensorError::BadShape(format!(
                "conv2d: kernels must be [kh,kw,cin,cout], got {kshape:?}"
            )));
        }
        let (batch, h, w, c) = match ishape.len() {
            3 => (1, ishape[0], ishape[1], ishape[2]),
            4 => (ishape[0], ishape[1], ishape[2], ishape[3]),
            _ => {
                return Err(TensorError::BadShape(format!(
                    "conv2d: input must be [H,W,C] or [B,H,W,C], got {ishape:?}"
                )))
            }
        };
        let (kh, kw, cin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if cin != c {
            return Err(TensorError::BadShape(format!(
                "conv2d: input has {c} channels (shape {ishape:?}) but kernels expect {cin} (shape {kshape:?})"
            )));
        }
        if stride < 1 {
            return Err(TensorError::Invalid("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::BadShape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom::new(batch, h, w, c, kh, kw, cout, stride, pad);
        let mut out = vec![0.0; geom.out_rows() * cout];
        let rg = self.rg(input) || self.rg(kernels_id);
        let col = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernels_id).data(),
            &mut out,
        );
        let col = if rg { col } else { Vec::new() };
        let oshape = if ishape.len() == 3 {
            vec![geom.out_h, geom.out_w, cout]
        } else {
            vec![batch, geom.out_h, geom.out_w, cout]
        };
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::Conv2d { input, kernels: kernels_id, geom, col }, rg))
    }

    // ---- reductions and broadcasts ----------------------------------------

    /// Per-channel mean over all leading axes: `[...,C] -> [C]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() < 2 {
            return Err(TensorError::BadShape(format!(
                "mean_rows: need rank >= 2, got {:?}",
                v.shape()
            )));
        }
        let (rows, c) = (v.rows(), v.channels());
        let mut out = vec![0.0; c];
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        let t = Tensor::new(vec![c], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MeanRows(a), rg))
    }

    /// Mean of a spatial map per channel: `[H,W,C] -> [C]` (alias of
    /// [`Graph::mean_rows`] with the spatial validation).
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).rank() != 3 {
            return Err(TensorError::BadShape(format!(
                "global_avg_pool: need [H,W,C], got {:?}",
                self.value(a).shape()
            )));
        }
        self.mean_rows(a)
    }

    /// Tile a channel vector over leading axes: `[C] -> [leading...,C]`.
    pub fn broadcast_rows(&mut self, a: NodeId, leading: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(TensorError::BadShape(format!(
                "broadcast_rows: need a vector, got {:?}",
                v.shape()
            )));
        }
        let c = v.len();
        let rows: usize = leading.iter().product();
        let mut shape = leading.to_vec();
        shape.push(c);
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::BroadcastRows(a), rg))
    }

    /// Per-batch-entry channel means: `[B,...,C] -> [B,C]`.
    pub fn mean_inner(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() < 3 {
            return Err(TensorError::BadShape(format!(
                "mean_inner: need rank >= 3, got {:?}",
                v.shape()
            )));
        }
        let b = v.shape()[0];
        let c = v.channels();
        let inner = v.len() / (b * c);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let src = &v.data()[bi * inner * c..(bi + 1) * inner * c];
            let dst = &mut out[bi * c..(bi + 1) * c];
            for r in 0..inner {
                let row = &src[r * c..(r + 1) * c];
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += x;
                }
            }
            let inv = 1.0 / inner as f64;
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MeanInner(a), rg))
    }

    /// Tile `[B,C]` over middle axes: `-> [B, middle..., C]`.
    pub fn broadcast_inner(
        &mut self,
        a: NodeId,
        middle: &[usize],
    ) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(TensorError::BadShape(format!(
                "broadcast_inner: need [B,C], got {:?}",
                v.shape()
            )));
        }
        let (b, c) = (v.shape()[0], v.shape()[1]);
        let inner: usize = middle.iter().product();
        let mut shape = vec![b];
        shape.extend_from_slice(middle);
        shape.push(c);
        let mut out = Vec::with_capacity(b * inner * c);
        for bi in 0..b {
            let row = &v.data()[bi * c..(bi + 1) * c];
            for _ in 0..inner {
                out.extend_from_slice(row);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::BroadcastInner(a), rg))
    }

    fn check_inner_pair(&self, x: NodeId, m: NodeId, what: &str) -> Result<(usize, usize, usize), TensorError> {
        let (vx, vm) = (self.value(x), self.value(m));
        if vx.rank() < 3 || vm.rank() != 2 || vm.shape()[0] != vx.shape()[0] || vm.shape()[1] != vx.channels() {
            return Err(TensorError::BadShape(format!(
                "{what}: {:?} with per-batch stats {:?}",
                vx.shape(),
                vm.shape()
            )));
        }
        let b = vx.shape()[0];
        let c = vx.channels();
        Ok((b, vx.len() / (b * c), c))
    }

    /// x - m with m per (batch entry, channel): x `[B,...,C]`, m `[B,C]`.
    pub fn sub_inner(&mut self, x: NodeId, m: NodeId) -> Result<NodeId, TensorError> {
        let (b, inner, c) = self.check_inner_pair(x, m, "sub_inner")?;
        let (vx, vm) = (self.value(x).data(), self.value(m).data());
        let mut out = Vec::with_capacity(vx.len());
        for bi in 0..b {
            let mrow = &vm[bi * c..(bi + 1) * c];
            for r in 0..inner {
                let row = &vx[(bi * inner + r) * c..(bi * inner + r + 1) * c];
                out.extend(row.iter().zip(mrow).map(|(&a, &s)| a - s));
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(t, Op::SubInner(x, m), rg))
    }

    /// x * m with m per (batch entry, channel).
    pub fn mul_inner(&mut self, x: NodeId, m: NodeId) -> Result<NodeId, TensorError> {
        let (b, inner, c) = self.check_inner_pair(x, m, "mul_inner")?;
        let (vx, vm) = (self.value(x).data(), self.value(m).data());
        let mut out = Vec::with_capacity(vx.len());
        for bi in 0..b {
            let mrow = &vm[bi * c..(bi + 1) * c];
            for r in 0..inner {
                let row = &vx[(bi * inner + r) * c..(bi * inner + r + 1) * c];
                out.extend(row.iter().zip(mrow).map(|(&a, &s)| a * s));
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(t, Op::MulInner(x, m), rg))
    }

    /// Per-batch-entry mean of squared values: `[B,...,C] -> [B,C]`.
    pub fn mean_inner_sq(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() < 3 {
            return Err(TensorError::BadShape(format!(
                "mean_inner_sq: need rank >= 3, got {:?}",
                v.shape()
            )));
        }
        let b = v.shape()[0];
        let c = v.channels();
        let inner = v.len() / (b * c);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let src = &v.data()[bi * inner * c..(bi + 1) * inner * c];
            let dst = &mut out[bi * c..(bi + 1) * c];
            for r in 0..inner {
                let row = &src[r * c..(r + 1) * c];
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += x * x;
                }
            }
            let inv = 1.0 / inner as f64;
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MeanInnerSq(a), rg))
    }

    fn check_channel_pair(&self, x: NodeId, v: NodeId, what: &str) -> Result<(usize, usize), TensorError> {
        let (vx, vv) = (self.value(x), self.value(v));
        if vv.rank() != 1 || vv.len() != vx.channels() {
            return Err(TensorError::BadShape(format!(
                "{what}: {:?} with channel vector {:?}",
                vx.shape(),
                vv.shape()
            )));
        }
        Ok((vx.rows(), vx.channels()))
    }

    fn channel_zip(&mut self, x: NodeId, v: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId, TensorError> {
        let (rows, c) = match &op {
            Op::MulChannels(..) => self.check_channel_pair(x, v, "mul_channels")?,
            Op::AddChannels(..) => self.check_channel_pair(x, v, "add_channels")?,
            _ => self.check_channel_pair(x, v, "sub_channels")?,
        };
        let (vx, vv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = &vx[r * c..(r + 1) * c];
            out.extend(row.iter().zip(vv).map(|(&a, &s)| f(a, s)));
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(t, op, rg))
    }

    /// x * v with v broadcast per channel over all leading axes.
    pub fn mul_channels(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        self.channel_zip(x, v, Op::MulChannels(x, v), |a, s| a * s)
    }

    /// x + v per channel.
    pub fn add_channels(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        self.channel_zip(x, v, Op::AddChannels(x, v), |a, s| a + s)
    }

    /// x - v per channel.
    pub fn sub_channels(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        self.channel_zip(x, v, Op::SubChannels(x, v), |a, s| a - s)
    }

    /// Sum over the last axis of a matrix: `[n,m] -> [n]`.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(TensorError::BadShape(format!(
                "row_sums: need a matrix, got {:?}",
                v.shape()
            )));
        }
        let (n, m) = (v.shape()[0], v.shape()[1]);
        let out: Vec<f64> = (0..n)
            .map(|i| v.data()[i * m..(i + 1) * m].iter().sum())
            .collect();
        let t = Tensor::new(vec![n], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::RowSums(a), rg))
    }

    /// Multiply row i of `[n,m]` by `scales[i]`.
    pub fn scale_rows(&mut self, a: NodeId, scales: NodeId) -> Result<NodeId, TensorError> {
        let (va, vs) = (self.value(a), self.value(scales));
        if va.rank() != 2 || vs.rank() != 1 || vs.len() != va.shape()[0] {
            return Err(TensorError::BadShape(format!(
                "scale_rows: {:?} by {:?}",
                va.shape(),
                vs.shape()
            )));
        }
        let (n, m) = (va.shape()[0], va.shape()[1]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let s = vs.data()[i];
            out.extend(va.data()[i * m..(i + 1) * m].iter().map(|&x| x * s));
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(a) || self.rg(scales);
        Ok(self.push(t, Op::ScaleRows(a, scales), rg))
    }

    // ---- shape ops ---------------------------------------------------------

    /// Concatenate along the last (feature) axis; leading axes must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::BadShape(format!(
                "concat: leading axes differ, {sa:?} vs {sb:?}"
            )));
        }
        let (ca, cb) = (va.channels(), vb.channels());
        let rows = va.rows();
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat(a, b), rg))
    }

    /// Stack vectors/matrices along the first axis. A vector `[d]` counts as
    /// one row.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_rows: no inputs".into()));
        }
        let d = self.value(parts[0]).channels();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() > 2 || v.channels() != d {
                return Err(TensorError::BadShape(format!(
                    "concat_rows: mixed node lengths, {:?} vs feature width {d}",
                    v.shape()
                )));
            }
            rows += v.rows();
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn take_row(&mut self, a: NodeId, i: usize) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() != 2 || i >= v.shape()[0] {
            return Err(TensorError::BadShape(format!(
                "take_row: row {i} of {:?}",
                v.shape()
            )));
        }
        let m = v.shape()[1];
        let out = v.data()[i * m..(i + 1) * m].to_vec();
        let t = Tensor::new(vec![m], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::TakeRow(a, i), rg))
    }

    /// Gather rows of a matrix.
    pub fn take_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() != 2 || indices.iter().any(|&i| i >= v.shape()[0]) {
            return Err(TensorError::BadShape(format!(
                "take_rows: rows {indices:?} of {:?}",
                v.shape()
            )));
        }
        let m = v.shape()[1];
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            out.extend_from_slice(&v.data()[i * m..(i + 1) * m]);
        }
        let t = Tensor::new(vec![indices.len(), m], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::TakeRows(a, indices.to_vec()), rg))
    }

    pub fn reshape(
        &mut self,
        a: NodeId,
        shape: impl Into<Vec<usize>>,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Negative log likelihood of `label` under softmax(logits).
    /// Numerically stabilized with max subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        label: usize,
    ) -> Result<NodeId, TensorError> {
        let v = self.value(logits);
        if v.rank() != 1 {
            return Err(TensorError::BadShape(format!(
                "softmax_cross_entropy: logits must be a vector, got {:?}",
                v.shape()
            )));
        }
        if label >= v.len() {
            return Err(TensorError::Invalid(format!(
                "softmax_cross_entropy: label {label} out of range for {} classes",
                v.len()
            )));
        }
        let probs = softmax(v.data());
        let m = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.data().iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        let loss = lse - v.data()[label];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, label, probs },
            rg,
        ))
    }

    /// Pairwise difference tensor of node features: out[i][j] = x_i - x_j.
    pub fn pairwise_diff(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(TensorError::BadShape(format!(
                "pairwise_diff: need [n,d], got {:?}",
                v.shape()
            )));
        }
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; n * n * d];
        for i in 0..n {
            let xi = &v.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let xj = &v.data()[j * d..(j + 1) * d];
                let dst = &mut out[(i * n + j) * d..(i * n + j + 1) * d];
                for ((o, &x), &y) in dst.iter_mut().zip(xi).zip(xj) {
                    *o = x - y;
                }
            }
        }
        let t = Tensor::new(vec![n, n, d], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::PairwiseDiff(a), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients land on every node
    /// with `requires_grad`; differentiable leaves that the loss does not
    /// reach get zero gradients. A second call on the same graph is
    /// rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::Invalid(
                "backward already ran on this graph; build a new graph per pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::BadShape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].grad = Some(g);
        }
        // Unreached differentiable leaves get zeros.
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() && matches!(node.op, Op::Leaf) {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Conv saves its patch matrix; take it before borrowing values.
        let taken_col = match &mut self.nodes[idx].op {
            Op::Conv2d { col, .. } => std::mem::take(col),
            _ => Vec::new(),
        };
        let nodes = &self.nodes;
        // Accumulate into the gradient slot of `target` when it wants one.
        macro_rules! acc {
            ($target:expr, $update:expr) => {{
                let t: NodeId = $target;
                if nodes[t.0].requires_grad {
                    let slot =
                        grads[t.0].get_or_insert_with(|| vec![0.0; nodes[t.0].value.len()]);
                    $update(slot.as_mut_slice());
                }
            }};
        }

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc!(a, |s: &mut [f64]| axpy(1.0, g, s));
                acc!(b, |s: &mut [f64]| axpy(1.0, g, s));
            }
            &Op::Sub(a, b) => {
                acc!(a, |s: &mut [f64]| axpy(1.0, g, s));
                acc!(b, |s: &mut [f64]| axpy(-1.0, g, s));
            }
            &Op::Mul(a, b) => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                acc!(a, |s: &mut [f64]| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc!(b, |s: &mut [f64]| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            &Op::Scale(a, c) => {
                acc!(a, |s: &mut [f64]| axpy(c, g, s));
            }
            &Op::AddScalar(a) => {
                acc!(a, |s: &mut [f64]| axpy(1.0, g, s));
            }
            &Op::Relu(a) => {
                let va = nodes[a.0].value.data();
                acc!(a, |s: &mut [f64]| {
                    for i in 0..s.len() {
                        if va[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = nodes[idx].value.data();
                acc!(a, |s: &mut [f64]| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            &Op::Abs(a) => {
                let va = nodes[a.0].value.data();
                acc!(a, |s: &mut [f64]| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sign(va[i]);
                    }
                });
            }
            &Op::Rsqrt(a) => {
                let y = nodes[idx].value.data();
                acc!(a, |s: &mut [f64]| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (-0.5 * y[i] * y[i] * y[i]);
                    }
                });
            }
            &Op::Recip(a) => {
                let y = nodes[idx].value.data();
                acc!(a, |s: &mut [f64]| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (-y[i] * y[i]);
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (m, k) = {
                    let sa = nodes[a.0].value.shape();
                    (sa[0], sa[1])
                };
                let n = nodes[b.0].value.shape()[1];
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                acc!(a, |s: &mut [f64]| kernels::gemm_nt(m, k, n, g, vb, s));
                acc!(b, |s: &mut [f64]| kernels::gemm_tn(m, k, n, va, g, s));
            }
            Op::Conv2d { input, kernels: kern, geom, .. } => {
                let (input, kern, geom) = (*input, *kern, *geom);
                let kvals = nodes[kern.0].value.data();
                acc!(kern, |s: &mut [f64]| {
                    kernels::gemm_tn(geom.out_rows(), geom.patch_len(), geom.out_c, &taken_col, g, s)
                });
                acc!(input, |s: &mut [f64]| {
                    kernels::conv2d_backward(&geom, &taken_col, kvals, g, None, Some(s));
                });
            }
            &Op::MeanRows(a) => {
                let rows = nodes[a.0].value.rows();
                let c = nodes[a.0].value.channels();
                let inv = 1.0 / rows as f64;
                acc!(a, |s: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..c {
                            s[r * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            &Op::BroadcastRows(a) => {
                let c = nodes[a.0].value.len();
                let rows = g.len() / c;
                acc!(a, |s: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j];
                        }
                    }
                });
            }
            &Op::MeanInner(a) => {
                let v = &nodes[a.0].value;
                let b = v.shape()[0];
                let c = v.channels();
                let inner = v.len() / (b * c);
                let inv = 1.0 / inner as f64;
                acc!(a, |s: &mut [f64]| {
                    for bi in 0..b {
                        for r in 0..inner {
                            for j in 0..c {
                                s[(bi * inner + r) * c + j] += g[bi * c + j] * inv;
                            }
                        }
                    }
                });
            }
            &Op::BroadcastInner(a) => {
                let v = &nodes[a.0].value;
                let b = v.shape()[0];
                let c = v.channels();
                let inner = g.len() / (b * c);
                acc!(a, |s: &mut [f64]| {
                    for bi in 0..b {
                        for r in 0..inner {
                            for j in 0..c {
                                s[bi * c + j] += g[(bi * inner + r) * c + j];
                            }
                        }
                    }
                });
            }
            &Op::SubInner(x, m) => {
                let v = &nodes[x.0].value;
                let b = v.shape()[0];
                let c = v.channels();
                let inner = v.len() / (b * c);
                acc!(x, |s: &mut [f64]| axpy(1.0, g, s));
                acc!(m, |s: &mut [f64]| {
                    for bi in 0..b {
                        for r in 0..inner {
                            for j in 0..c {
                                s[bi * c + j] -= g[(bi * inner + r) * c + j];
                            }
                        }
                    }
                });
            }
            &Op::MulInner(x, m) => {
                let v = &nodes[x.0].value;
                let b = v.shape()[0];
                let c = v.channels();
                let inner = v.len() / (b * c);
                let vx = v.data();
                let vm = nodes[m.0].value.data();
                acc!(x, |s: &mut [f64]| {
                    for bi in 0..b {
                        let mrow = &vm[bi * c..(bi + 1) * c];
                        for r in 0..inner {
                            let o = (bi * inner + r) * c;
                            for j in 0..c {
                                s[o + j] += g[o + j] * mrow[j];
                            }
                        }
                    }
                });
                acc!(m, |s: &mut [f64]| {
                    for bi in 0..b {
                        for r in 0..inner {
                            let o = (bi * inner + r) * c;
                            for j in 0..c {
                                s[bi * c + j] += g[o + j] * vx[o + j];
                            }
                        }
                    }
                });
            }
            &Op::MeanInnerSq(a) => {
                let v = &nodes[a.0].value;
                let b = v.shape()[0];
                let c = v.channels();
                let inner = v.len() / (b * c);
                let inv = 2.0 / inner as f64;
                let va = v.data();
                acc!(a, |s: &mut [f64]| {
                    for bi in 0..b {
                        for r in 0..inner {
                            let o = (bi * inner + r) * c;
                            for j in 0..c {
                                s[o + j] += g[bi * c + j] * inv * va[o + j];
                            }
                        }
                    }
                });
            }
            &Op::MulChannels(x, v) => {
                let rows = nodes[x.0].value.rows();
                let c = nodes[x.0].value.channels();
                let vx = nodes[x.0].value.data();
                let vv = nodes[v.0].value.data();
                acc!(x, |s: &mut [f64]| {
                    for r in 0..rows {
                        let o = r * c;
                        for j in 0..c {
                            s[o + j] += g[o + j] * vv[j];
                        }
                    }
                });
                acc!(v, |s: &mut [f64]| {
                    for r in 0..rows {
                        let o = r * c;
                        for j in 0..c {
                            s[j] += g[o + j] * vx[o + j];
                        }
                    }
                });
            }
            &Op::AddChannels(x, v) => {
                let rows = nodes[x.0].value.rows();
                let c = nodes[x.0].value.channels();
                acc!(x, |s: &mut [f64]| axpy(1.0, g, s));
                acc!(v, |s: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j];
                        }
                    }
                });
            }
            &Op::SubChannels(x, v) => {
                let rows = nodes[x.0].value.rows();
                let c = nodes[x.0].value.channels();
                acc!(x, |s: &mut [f64]| axpy(1.0, g, s));
                acc!(v, |s: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] -= g[r * c + j];
                        }
                    }
                });
            }
            &Op::RowSums(a) => {
                let m = nodes[a.0].value.shape()[1];
                acc!(a, |s: &mut [f64]| {
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..m {
                            s[i * m + j] += gi;
                        }
                    }
                });
            }
            &Op::ScaleRows(a, sc) => {
                let va = nodes[a.0].value.data();
                let vs = nodes[sc.0].value.data();
                let m = nodes[a.0].value.shape()[1];
                acc!(a, |s: &mut [f64]| {
                    for i in 0..vs.len() {
                        for j in 0..m {
                            s[i * m + j] += g[i * m + j] * vs[i];
                        }
                    }
                });
                acc!(sc, |s: &mut [f64]| {
                    for i in 0..vs.len() {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * va[i * m + j];
                        }
                        s[i] += acc;
                    }
                });
            }
            &Op::Concat(a, b) => {
                let ca = nodes[a.0].value.channels();
                let cb = nodes[b.0].value.channels();
                let rows = nodes[a.0].value.rows();
                acc!(a, |s: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..ca {
                            s[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                });
                acc!(b, |s: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..cb {
                            s[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for i in 0..parts.len() {
                    let p = parts[i];
                    let len = nodes[p.0].value.len();
                    let start = offset;
                    acc!(p, |s: &mut [f64]| axpy(1.0, &g[start..start + len], s));
                    offset += len;
                }
            }
            &Op::TakeRow(a, i) => {
                let m = nodes[a.0].value.shape()[1];
                acc!(a, |s: &mut [f64]| {
                    for j in 0..m {
                        s[i * m + j] += g[j];
                    }
                });
            }
            Op::TakeRows(a, indices) => {
                let a = *a;
                let m = nodes[a.0].value.shape()[1];
                acc!(a, |s: &mut [f64]| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..m {
                            s[i * m + j] += g[r * m + j];
                        }
                    }
                });
            }
            &Op::Reshape(a) => {
                acc!(a, |s: &mut [f64]| axpy(1.0, g, s));
            }
            &Op::Sum(a) => {
                let gv = g[0];
                acc!(a, |s: &mut [f64]| {
                    for x in s.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                let (logits, label) = (*logits, *label);
                let gv = g[0];
                acc!(logits, |s: &mut [f64]| {
                    for (i, p) in probs.iter().enumerate() {
                        let one_hot = if i == label { 1.0 } else { 0.0 };
                        s[i] += gv * (p - one_hot);
                    }
                });
            }
            &Op::PairwiseDiff(a) => {
                let (n, d) = {
                    let s = nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                acc!(a, |s: &mut [f64]| {
                    for i in 0..n {
                        for j in 0..n {
                            let gij = &g[(i * n + j) * d..(i * n + j + 1) * d];
                            for t in 0..d {
                                s[i * d + t] += gij[t];
                                s[j * d + t] -= gij[t];
                            }
                        }
                    }
                });
            }
        }
    }

    // ---- composites --------------------------------------------------------

    /// Normalize per channel, scale and shift. `x` is `[B,...,C]` (or
    /// `[...,C]` treated as batch 1 when rank 2). In train mode statistics
    /// come from `x` itself per batch entry and are returned for running
    /// updates; in eval mode the caller supplies fixed per-channel mean and
    /// variance.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>), TensorError> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::BadShape(format!(
                "batch_norm: scale/shift must be [{c}], got {:?}/{:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        match running {
            Some((mu, var)) => {
                if mu.len() != c || var.len() != c {
                    return Err(TensorError::BadShape(
                        "batch_norm: running stats length mismatch".into(),
                    ));
                }
                let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let mu_n = self.constant(Tensor::vector(mu.to_vec()));
                let inv_n = self.constant(Tensor::vector(inv));
                let xc = self.sub_channels(x, mu_n)?;
                let scale = self.mul(gamma, inv_n)?;
                let scaled = self.mul_channels(xc, scale)?;
                let out = self.add_channels(scaled, beta)?;
                Ok((out, None))
            }
            None => {
                // Per-sample statistics over the non-batch, non-channel axes.
                let rank = shape.len();
                let batched = if rank >= 3 {
                    x
                } else {
                    // [rows, C]: treat as one batch entry of rows.
                    let mut s = vec![1];
                    s.extend_from_slice(&shape);
                    self.reshape(x, s)?
                };
                let mu = self.mean_inner(batched)?;
                let xc = self.sub_inner(batched, mu)?;
                let var = self.mean_inner_sq(xc)?;
                let var_eps = self.add_scalar(var, eps);
                let inv = self.rsqrt(var_eps);
                let xh_b = self.mul_inner(xc, inv)?;
                let xh = if rank >= 3 { xh_b } else { self.reshape(xh_b, shape.clone())? };
                let scaled = self.mul_channels(xh, gamma)?;
                let out = self.add_channels(scaled, beta)?;
                let stats = BatchStats {
                    mean: per_channel_mean(self.value(mu).data(), c),
                    var: per_channel_mean(self.value(var).data(), c),
                };
                Ok((out, Some(stats)))
            }
        }
    }
}

/// Per-channel statistics observed by one train-mode normalization, averaged
/// over the batch; feeds the running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn per_channel_mean(flat: &[f64], c: usize) -> Vec<f64> {
    let rows = flat.len() / c;
    let mut out = vec![0.0; c];
    for r in 0..rows {
        for j in 0..c {
            out[j] += flat[r * c + j];
        }
    }
    let inv = 1.0 / rows as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

/// Stable softmax of a logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}
