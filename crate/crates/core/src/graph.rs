//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward computation in creation
//! order (the tape). [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//! Values are computed eagerly, so a node's output is available as soon as
//! the builder method returns.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::kernels::{self, Conv3dMeta};
use crate::tensor::{LayerParams, Tensor};
use crate::{Error, Result};

/// Process-wide activation memory accounting (node value buffers).
pub mod mem {
    use super::*;

    static LIVE: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub(super) fn add(bytes: usize) {
        let now = LIVE.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    pub(super) fn sub(bytes: usize) {
        LIVE.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub fn live_bytes() -> usize {
        LIVE.load(Ordering::Relaxed)
    }

    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Reset the peak to the current live figure.
    pub fn reset_peak() {
        PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId, f32),
    Exp(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Clamp(NodeId, f32, f32),
    Matmul {
        a: NodeId,
        b: NodeId,
        tb: bool,
        b_shared: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: NodeId,
        rows: usize,
        cols: usize,
        mask: Option<Arc<Vec<f32>>>,
    },
    Norm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        groups: Arc<Vec<(usize, usize)>>,
        len: usize,
        eps: f32,
    },
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        meta: Conv3dMeta,
    },
    Upsample3d {
        x: NodeId,
        factors: (usize, usize, usize),
    },
    LowpassDown {
        x: NodeId,
        axes: [bool; 3],
    },
    LowpassUp {
        x: NodeId,
        axes: [bool; 3],
        targets: (usize, usize, usize),
    },
    IndexMap {
        x: NodeId,
        map: Arc<Vec<u32>>,
    },
    Reshape(NodeId),
    Expand {
        x: NodeId,
        in_shape: Vec<usize>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Embedding {
        table: NodeId,
        ids: Arc<Vec<u32>>,
        dim: usize,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Arc<Vec<f32>>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    rg: bool,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.idx()).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, NodeId>,
}

impl Drop for Graph {
    fn drop(&mut self) {
        let bytes: usize = self.nodes.iter().map(|n| n.value.len() * 4).sum();
        mem::sub(bytes);
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.idx()].value
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.idx()];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, rg: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        mem::add(value.len() * 4);
        self.nodes.push(Node { shape, value, op, rg });
        NodeId(self.nodes.len() as u32 - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].rg
    }

    // -- leaves ------------------------------------------------------------

    /// Constant input (no gradient).
    pub fn input(&mut self, shape: &[usize], data: Vec<f32>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "input data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Bind a named parameter as a differentiable leaf. Binding the same name
    /// twice returns the original node, so shared tables accumulate gradient
    /// across all of their uses.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        if let Some(id) = self.bound.get(name) {
            return *id;
        }
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Differentiable leaf without a name (finite-difference probes).
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }

    // -- elementwise -------------------------------------------------------

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a, c), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Exp(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|x| kernels::sigmoid(*x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|x| kernels::gelu(*x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Gelu(a), rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f32, hi: f32) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Clamp(a, lo, hi), rg)
    }

    // -- linear algebra ------------------------------------------------------

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is `[..., k, n]`
    /// (or `[..., n, k]` with `transpose_b`). The batch of `b` must equal
    /// the batch of `a` or be 1 (shared weights).
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!(
                "matmul operands need rank >= 2, got {sa:?} x {sb:?}"
            )));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (bk, bn) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {sa:?} x {sb:?} (transpose_b={transpose_b})"
            )));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batch: usize = sb[..sb.len() - 2].iter().product();
        let b_shared = b_batch == 1;
        if !b_shared && b_batch != batch {
            return Err(Error::shape(format!(
                "matmul batch extents differ: {batch} vs {b_batch}"
            )));
        }
        let mut out = vec![0.0f32; batch * m * bn];
        kernels::matmul(
            batch,
            m,
            k,
            bn,
            self.value(a),
            false,
            self.value(b),
            transpose_b,
            b_shared,
            false,
            &mut out,
        );
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(bn);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::Matmul { a, b, tb: transpose_b, b_shared, batch, m, k, n: bn },
            rg,
        ))
    }

    /// Row softmax over the trailing axis, max-subtracted, with an optional
    /// additive mask of the same flattened extent.
    pub fn softmax(&mut self, x: NodeId, mask: Option<Arc<Vec<f32>>>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("softmax on rank-0"))?;
        if cols == 0 {
            return Err(Error::shape("softmax over an empty trailing axis"));
        }
        let rows = self.value(x).len() / cols;
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(Error::shape(format!(
                    "softmax mask length {} != {rows}x{cols}",
                    m.len()
                )));
            }
        }
        let mut out = vec![0.0f32; rows * cols];
        kernels::softmax_rows(self.value(x), rows, cols, mask.as_deref().map(|m| &m[..]), &mut out);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, rows, cols, mask }, rg))
    }

    /// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
    ///
    /// `q`: [B, H, Lq, d], `k`/`v`: [B, H, Lk, d]. An optional additive mask
    /// (length B*H*Lq*Lk) is applied to the logits before the softmax.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        self.attention_masked(q, k, v, None).map(|(out, _)| out)
    }

    pub fn attention_masked(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<Arc<Vec<f32>>>,
    ) -> Result<(NodeId, NodeId)> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 4 || sk.len() != 4 || sv.len() != 4 {
            return Err(Error::shape(format!(
                "attention expects BxHxLxd operands, got q{sq:?} k{sk:?} v{sv:?}"
            )));
        }
        let d = sq[3];
        let lk = sk[2];
        if d == 0 {
            return Err(Error::invalid("attention head dimension is zero"));
        }
        if lk == 0 {
            return Err(Error::invalid("attention key sequence is empty"));
        }
        if sk[0] != sq[0] || sk[1] != sq[1] || sk[3] != d || sv != sk {
            return Err(Error::shape(format!(
                "attention operand extents differ: q{sq:?} k{sk:?} v{sv:?}"
            )));
        }
        let logits = self.matmul(q, k, true)?;
        let scaled = self.scale(logits, 1.0 / (d as f32).sqrt());
        let weights = self.softmax(scaled, mask)?;
        let out = self.matmul(weights, v, false)?;
        Ok((out, weights))
    }

    /// Layer normalization over the trailing axis with learned gain/shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("layer_norm on rank-0"))?;
        if cols == 0 {
            return Err(Error::shape("layer_norm feature axis has length 0"));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape(format!(
                "layer_norm gain/bias must have shape [{cols}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.value(x).len() / cols;
        let groups = Arc::new(kernels::rows_groups(rows, cols));
        self.norm_common(x, gain, bias, groups, cols, eps, shape)
    }

    /// Normalize across the channel axis of an N x C x ... tensor.
    pub fn channel_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "channel_norm expects N x C x spatial..., got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "channel_norm gain/bias must have shape [{c}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let groups = Arc::new(kernels::channel_groups(n, c, s));
        self.norm_common(x, gain, bias, groups, c, eps, shape)
    }

    fn norm_common(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        groups: Arc<Vec<(usize, usize)>>,
        len: usize,
        eps: f32,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let mut out = vec![0.0f32; self.value(x).len()];
        kernels::norm_forward(
            self.value(x),
            &groups,
            len,
            self.value(gain),
            self.value(bias),
            eps,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, out, Op::Norm { x, gain, bias, groups, len, eps }, rg))
    }

    // -- convolution and resampling -----------------------------------------

    /// Causal 3-D convolution over NCTHW: temporal padding only on the past
    /// side (replicate first frame), symmetric zero spatial padding.
    pub fn causal_conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: (usize, usize, usize),
    ) -> Result<NodeId> {
        let meta = Conv3dMeta::infer(self.shape(input), self.shape(weight), stride)?;
        if let Some(b) = bias {
            if self.shape(b) != [meta.oc] {
                return Err(Error::shape(format!(
                    "conv bias must have shape [{}], got {:?}",
                    meta.oc,
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0f32; meta.out_shape().iter().product()];
        kernels::conv3d_forward(
            &meta,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &mut out,
        );
        let rg =
            self.rg(input) || self.rg(weight) || bias.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(meta.out_shape(), out, Op::Conv3d { input, weight, bias, meta }, rg))
    }

    /// Nearest-neighbor upsampling of NCTHW; temporal axis follows the causal
    /// convention T_out = (T-1)*ft + 1.
    pub fn upsample3d(&mut self, x: NodeId, factors: (usize, usize, usize)) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape(format!("upsample3d expects NCTHW, got {s:?}")));
        }
        let (ft, fh, fw) = factors;
        let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (to, ho, wo) = ((t - 1) * ft + 1, h * fh, w * fw);
        let mut out = vec![0.0f32; n * c * to * ho * wo];
        kernels::upsample3d_forward(self.value(x), n * c, t, h, w, ft, fh, fw, &mut out);
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, to, ho, wo], out, Op::Upsample3d { x, factors }, rg))
    }

    /// Haar low-pass analysis along the selected (t, h, w) axes of NCTHW.
    pub fn lowpass_down(&mut self, x: NodeId, axes: [bool; 3]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape(format!("lowpass_down expects NCTHW, got {s:?}")));
        }
        let value = self.lowpass_down_value(self.value(x).to_vec(), &s, axes)?;
        let mut out_shape = s.clone();
        for (ax, on) in axes.iter().enumerate() {
            if *on {
                out_shape[2 + ax] = s[2 + ax].div_ceil(2);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, value, Op::LowpassDown { x, axes }, rg))
    }

    fn lowpass_down_value(
        &self,
        mut cur: Vec<f32>,
        shape: &[usize],
        axes: [bool; 3],
    ) -> Result<Vec<f32>> {
        let mut dims = [shape[2], shape[3], shape[4]];
        let nc = shape[0] * shape[1];
        // w, then h, then t: spatial axes require even extents.
        for ax in (0..3).rev() {
            if !axes[ax] {
                continue;
            }
            if ax > 0 && dims[ax] % 2 != 0 {
                return Err(Error::shape(format!(
                    "lowpass_down spatial axis {ax} extent {} must be even",
                    dims[ax]
                )));
            }
            let inner: usize = dims[ax + 1..].iter().product();
            let outer = nc * dims[..ax].iter().product::<usize>();
            let out_len = dims[ax].div_ceil(2);
            let mut next = vec![0.0f32; outer * out_len * inner];
            kernels::lowpass_down_axis(&cur, outer, dims[ax], inner, &mut next);
            dims[ax] = out_len;
            cur = next;
        }
        Ok(cur)
    }

    /// Haar synthesis of a low-pass band along the selected axes, up to the
    /// given target (t, h, w) extents.
    pub fn lowpass_up(
        &mut self,
        x: NodeId,
        axes: [bool; 3],
        targets: (usize, usize, usize),
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape(format!("lowpass_up expects NCTHW, got {s:?}")));
        }
        let tg = [targets.0, targets.1, targets.2];
        for ax in 0..3 {
            let cur = s[2 + ax];
            if axes[ax] {
                if tg[ax] != 2 * cur && tg[ax] != 2 * cur - 1 {
                    return Err(Error::shape(format!(
                        "lowpass_up axis {ax}: extent {cur} cannot reach target {}",
                        tg[ax]
                    )));
                }
            } else if tg[ax] != cur {
                return Err(Error::shape(format!(
                    "lowpass_up axis {ax} disabled but target {} != extent {cur}",
                    tg[ax]
                )));
            }
        }
        let mut dims = [s[2], s[3], s[4]];
        let nc = s[0] * s[1];
        let mut cur = self.value(x).to_vec();
        for ax in 0..3 {
            if !axes[ax] {
                continue;
            }
            let inner: usize = dims[ax + 1..].iter().product();
            let outer = nc * dims[..ax].iter().product::<usize>();
            let mut next = vec![0.0f32; outer * tg[ax] * inner];
            kernels::lowpass_up_axis(&cur, outer, dims[ax], inner, tg[ax], &mut next);
            dims[ax] = tg[ax];
            cur = next;
        }
        let out_shape = vec![s[0], s[1], dims[0], dims[1], dims[2]];
        let rg = self.rg(x);
        Ok(self.push(out_shape, cur, Op::LowpassUp { x, axes, targets }, rg))
    }

    // -- data movement -------------------------------------------------------

    /// Gather: out[i] = x[map[i]], with `u32::MAX` filling zeros.
    pub fn index_map(
        &mut self,
        x: NodeId,
        map: Arc<Vec<u32>>,
        out_shape: &[usize],
    ) -> Result<NodeId> {
        let n: usize = out_shape.iter().product();
        if n != map.len() {
            return Err(Error::shape(format!(
                "index map length {} does not match output shape {:?}",
                map.len(),
                out_shape
            )));
        }
        let xv = self.value(x);
        let in_len = xv.len() as u32;
        let mut out = vec![0.0f32; n];
        for (o, &m) in out.iter_mut().zip(map.iter()) {
            if m != u32::MAX {
                debug_assert!(m < in_len);
                *o = xv[m as usize];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape.to_vec(), out, Op::IndexMap { x, map }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.value(x).len(),
                shape
            )));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Broadcast axes of extent 1 up to the target shape (same rank).
    pub fn expand(&mut self, x: NodeId, out_shape: &[usize]) -> Result<NodeId> {
        let in_shape = self.shape(x).to_vec();
        if in_shape.len() != out_shape.len() {
            return Err(Error::shape(format!(
                "expand rank mismatch: {in_shape:?} vs {out_shape:?}"
            )));
        }
        for (i, (&a, &b)) in in_shape.iter().zip(out_shape).enumerate() {
            if a != b && a != 1 {
                return Err(Error::shape(format!(
                    "expand axis {i}: extent {a} cannot broadcast to {b}"
                )));
            }
        }
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0f32; out_len];
        expand_fill(self.value(x), &in_shape, out_shape, &mut out);
        let rg = self.rg(x);
        Ok(self.push(out_shape.to_vec(), out, Op::Expand { x, in_shape }, rg))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().map(|v| f64::from(*v)).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s as f32], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1);
        let s: f64 = self.value(x).iter().map(|v| f64::from(*v)).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![(s / n as f64) as f32], Op::MeanAll(x), rg)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Row gather from an embedding table [V, d].
    pub fn embedding(&mut self, table: NodeId, ids: Arc<Vec<u32>>) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(format!("embedding table must be [V, d], got {ts:?}")));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::invalid(format!(
                "token id {bad} out of vocabulary range {v}"
            )));
        }
        let tv = self.value(table);
        let mut out = vec![0.0f32; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.rg(table);
        let n = ids.len();
        Ok(self.push(vec![n, d], out, Op::Embedding { table, ids, dim: d }, rg))
    }

    /// Mean binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Arc<Vec<f32>>) -> Result<NodeId> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(Error::shape(format!(
                "bce targets length {} != logits length {n}",
                targets.len()
            )));
        }
        let mut acc = 0.0f64;
        for (x, y) in self.value(logits).iter().zip(targets.iter()) {
            let stable = x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln();
            acc += f64::from(stable);
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![(acc / n as f64) as f32], Op::BceWithLogits { logits, targets }, rg))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients for
    /// every leaf that requires grad (and interior nodes along the way).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.idx()] = Some(vec![1.0]);

        for i in (0..=loss.idx()).rev() {
            if grads[i].is_none() || !self.nodes[i].rg {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.accumulate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for the named parameters bound into this graph. Parameters
    /// that did not participate get exact zeros.
    pub fn param_grads(
        &self,
        grads: &Gradients,
        params: &LayerParams,
    ) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        for (name, t) in params.iter() {
            let g = self
                .bound
                .get(name)
                .and_then(|id| grads.get(*id))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(name.clone(), g);
        }
        out
    }

    fn accumulate(&self, i: usize, g: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
        let node = &self.nodes[i];
        macro_rules! buf {
            ($id:expr) => {{
                let idx = $id.idx();
                let len = self.nodes[idx].value.len();
                grads[idx].get_or_insert_with(|| vec![0.0f32; len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let d = buf!(a);
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g;
                    }
                }
                if self.rg(*b) {
                    let d = buf!(b);
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let d = buf!(a);
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g;
                    }
                }
                if self.rg(*b) {
                    let d = buf!(b);
                    for (d, g) in d.iter_mut().zip(g) {
                        *d -= g;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = &self.nodes[b.idx()].value;
                    let d = buf!(a);
                    for ((d, g), bv) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * bv;
                    }
                }
                if self.rg(*b) {
                    let av = &self.nodes[a.idx()].value;
                    let d = buf!(b);
                    for ((d, g), av) in d.iter_mut().zip(g).zip(av) {
                        *d += g * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let d = buf!(a);
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g * c;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if self.rg(*a) {
                    let d = buf!(a);
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g;
                    }
                }
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    let y = &node.value;
                    let d = buf!(a);
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let y = &node.value;
                    let d = buf!(a);
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let x = &self.nodes[a.idx()].value;
                    let d = buf!(a);
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * kernels::gelu_deriv(*x);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.rg(*a) {
                    let x = &self.nodes[a.idx()].value;
                    let d = buf!(a);
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > *lo && *x < *hi {
                            *d += g;
                        }
                    }
                }
            }
            Op::Matmul { a, b, tb, b_shared, batch, m, k, n } => {
                if self.rg(*a) {
                    let bv = &self.nodes[b.idx()].value;
                    let da = buf!(a);
                    kernels::matmul_grad_a(*batch, *m, *k, *n, g, bv, *tb, *b_shared, da);
                }
                if self.rg(*b) {
                    let av = &self.nodes[a.idx()].value;
                    let db = buf!(b);
                    kernels::matmul_grad_b(*batch, *m, *k, *n, av, g, *tb, *b_shared, db);
                }
            }
            Op::Softmax { x, rows, cols, .. } => {
                if self.rg(*x) {
                    let y = &node.value;
                    let d = buf!(x);
                    kernels::softmax_rows_backward(y, g, *rows, *cols, d);
                }
            }
            Op::Norm { x, gain, bias, groups, len, eps } => {
                let xv = &self.nodes[x.idx()].value;
                let gv = &self.nodes[gain.idx()].value;
                let want_x = self.rg(*x);
                let want_g = self.rg(*gain);
                let want_b = self.rg(*bias);
                // Split borrows: compute into fresh buffers, then merge.
                let mut dx = want_x.then(|| vec![0.0f32; xv.len()]);
                let mut dg = want_g.then(|| vec![0.0f32; gv.len()]);
                let mut db = want_b.then(|| vec![0.0f32; gv.len()]);
                kernels::norm_backward(
                    xv,
                    groups,
                    *len,
                    gv,
                    *eps,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    let d = buf!(x);
                    for (d, s) in d.iter_mut().zip(&dx) {
                        *d += s;
                    }
                }
                if let Some(dg) = dg {
                    let d = buf!(gain);
                    for (d, s) in d.iter_mut().zip(&dg) {
                        *d += s;
                    }
                }
                if let Some(db) = db {
                    let d = buf!(bias);
                    for (d, s) in d.iter_mut().zip(&db) {
                        *d += s;
                    }
                }
            }
            Op::Conv3d { input, weight, bias, meta } => {
                let iv = &self.nodes[input.idx()].value;
                let wv = &self.nodes[weight.idx()].value;
                let want_i = self.rg(*input);
                let want_w = self.rg(*weight);
                let want_b = bias.map(|b| self.rg(b)).unwrap_or(false);
                let mut di = want_i.then(|| vec![0.0f32; iv.len()]);
                let mut dw = want_w.then(|| vec![0.0f32; wv.len()]);
                let mut db = want_b.then(|| vec![0.0f32; meta.oc]);
                kernels::conv3d_backward(
                    meta,
                    iv,
                    wv,
                    g,
                    di.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(di) = di {
                    let d = buf!(input);
                    for (d, s) in d.iter_mut().zip(&di) {
                        *d += s;
                    }
                }
                if let Some(dw) = dw {
                    let d = buf!(weight);
                    for (d, s) in d.iter_mut().zip(&dw) {
                        *d += s;
                    }
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    let d = buf!(b);
                    for (d, s) in d.iter_mut().zip(&db) {
                        *d += s;
                    }
                }
            }
            Op::Upsample3d { x, factors } => {
                if self.rg(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
                    let d = buf!(x);
                    kernels::upsample3d_backward(
                        g, n * c, t, h, w, factors.0, factors.1, factors.2, d,
                    );
                }
            }
            Op::LowpassDown { x, axes } => {
                if self.rg(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let nc = s[0] * s[1];
                    let mut dims = [s[2], s[3], s[4]];
                    // Walk forward to capture intermediate dims, then reverse.
                    let mut steps: Vec<(usize, usize, usize)> = Vec::new(); // (axis, len, inner) in forward order
                    for ax in (0..3).rev() {
                        if !axes[ax] {
                            continue;
                        }
                        let inner: usize = dims[ax + 1..].iter().product();
                        steps.push((ax, dims[ax], inner));
                        dims[ax] = dims[ax].div_ceil(2);
                    }
                    // Reverse through the chain, materializing intermediates.
                    let mut cur = g.to_vec();
                    for &(ax, len, inner) in steps.iter().rev() {
                        let outer = nc
                            * dims[..ax]
                                .iter()
                                .product::<usize>();
                        let mut prev = vec![0.0f32; outer * len * inner];
                        kernels::lowpass_down_axis_backward(&cur, outer, len, inner, &mut prev);
                        dims[ax] = len;
                        cur = prev;
                    }
                    let d = buf!(x);
                    for (d, s) in d.iter_mut().zip(&cur) {
                        *d += s;
                    }
                }
            }
            Op::LowpassUp { x, axes, targets } => {
                if self.rg(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let nc = s[0] * s[1];
                    let tg = [targets.0, targets.1, targets.2];
                    let mut dims = [s[2], s[3], s[4]];
                    let mut steps: Vec<(usize, usize, usize, usize)> = Vec::new(); // (axis, len, inner, target)
                    for ax in 0..3 {
                        if !axes[ax] {
                            continue;
                        }
                        let inner: usize = dims[ax + 1..].iter().product();
                        steps.push((ax, dims[ax], inner, tg[ax]));
                        dims[ax] = tg[ax];
                    }
                    let mut cur = g.to_vec();
                    for &(ax, len, inner, target) in steps.iter().rev() {
                        let outer = nc * dims[..ax].iter().product::<usize>();
                        let mut prev = vec![0.0f32; outer * len * inner];
                        kernels::lowpass_up_axis_backward(&cur, outer, len, inner, target, &mut prev);
                        dims[ax] = len;
                        cur = prev;
                    }
                    let d = buf!(x);
                    for (d, s) in d.iter_mut().zip(&cur) {
                        *d += s;
                    }
                }
            }
            Op::IndexMap { x, map } => {
                if self.rg(*x) {
                    let d = buf!(x);
                    for (gi, &m) in g.iter().zip(map.iter()) {
                        if m != u32::MAX {
                            d[m as usize] += gi;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let d = buf!(x);
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g;
                    }
                }
            }
            Op::Expand { x, in_shape } => {
                if self.rg(*x) {
                    let out_shape = &node.shape;
                    let d = buf!(x);
                    expand_backward(g, in_shape, out_shape, d);
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let gv = g[0];
                    let d = buf!(x);
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.rg(*x) {
                    let n = self.nodes[x.idx()].value.len().max(1);
                    let gv = g[0] / n as f32;
                    let d = buf!(x);
                    for d in d.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                if self.rg(*table) {
                    let d = buf!(table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id as usize * dim..(id as usize + 1) * dim];
                        let src = &g[r * dim..(r + 1) * dim];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.rg(*logits) {
                    let x = &self.nodes[logits.idx()].value;
                    let n = x.len() as f32;
                    let gv = g[0] / n;
                    let d = buf!(logits);
                    for ((d, x), y) in d.iter_mut().zip(x).zip(targets.iter()) {
                        *d += gv * (kernels::sigmoid(*x) - y);
                    }
                }
            }
        }
    }
}

fn expand_fill(x: &[f32], in_shape: &[usize], out_shape: &[usize], out: &mut [f32]) {
    let rank = out_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for ax in (0..rank).rev() {
        in_strides[ax] = if in_shape[ax] == 1 { 0 } else { acc };
        acc *= in_shape[ax];
    }
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for ax in 0..rank {
            src += idx[ax] * in_strides[ax];
        }
        *o = x[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn expand_backward(g: &[f32], in_shape: &[usize], out_shape: &[usize], dx: &mut [f32]) {
    let rank = out_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for ax in (0..rank).rev() {
        in_strides[ax] = if in_shape[ax] == 1 { 0 } else { acc };
        acc *= in_shape[ax];
    }
    let mut idx = vec![0usize; rank];
    for gv in g.iter() {
        let mut src = 0usize;
        for ax in 0..rank {
            src += idx[ax] * in_strides[ax];
        }
        dx[src] += gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
