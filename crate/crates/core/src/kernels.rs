//! Raw numeric kernels behind the graph ops.
//!
//! Everything here works on flat `f32` slices with explicit shape metadata.
//! Parallel loops always assign each output element to exactly one task, so
//! results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::{Error, Result};

pub const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

const GELU_C0: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_C1: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_deriv(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Batched matrix multiply
// ---------------------------------------------------------------------------

/// `out[b] (+)= A[b] * B[b or 0]` for logical shapes A: m x k, B: k x n.
///
/// `ta`/`tb` describe the *storage* layout: when set, the operand is stored
/// transposed (k x m, resp. n x k). `b_shared` reuses B\[0\] for every batch.
/// When `accumulate` is false the output is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    b_shared: bool,
    accumulate: bool,
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), if b_shared { k * n } else { batch * k * n });
    debug_assert_eq!(out.len(), batch * m * n);

    // Transposed-A storage is only reached from backward passes; materialize
    // the row-major copy once so the row kernels below stay contiguous.
    let a_rowmajor: Vec<f32>;
    let a = if ta {
        let mut t = vec![0.0f32; batch * m * k];
        for bi in 0..batch {
            let src = &a[bi * m * k..(bi + 1) * m * k];
            let dst = &mut t[bi * m * k..(bi + 1) * m * k];
            for l in 0..k {
                for i in 0..m {
                    dst[i * k + l] = src[l * m + i];
                }
            }
        }
        a_rowmajor = t;
        &a_rowmajor[..]
    } else {
        a
    };

    out.par_chunks_mut(n).enumerate().for_each(|(row, out_row)| {
        let bi = row / m;
        let i = row % m;
        let a_row = &a[(bi * m + i) * k..(bi * m + i) * k + k];
        let b_mat = if b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
        if !accumulate {
            out_row.fill(0.0);
        }
        if tb {
            // B stored n x k: dot products.
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b_mat[j * k..j * k + k];
                let mut acc = 0.0f32;
                for l in 0..k {
                    acc += a_row[l] * b_row[l];
                }
                *o += acc;
            }
        } else {
            for (l, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b_mat[l * n..l * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    });
}

/// Gradient of `matmul` with respect to A (same storage conventions).
#[allow(clippy::too_many_arguments)]
pub fn matmul_grad_a(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    grad_out: &[f32],
    b: &[f32],
    tb: bool,
    b_shared: bool,
    da: &mut [f32],
) {
    // dA = dC * B^T. With B stored k x n this is the `tb` kernel over the
    // original storage; with B stored n x k it is the plain kernel.
    matmul(batch, m, n, k, grad_out, false, b, !tb, b_shared, true, da);
}

/// Gradient of `matmul` with respect to B (written in B's storage layout).
#[allow(clippy::too_many_arguments)]
pub fn matmul_grad_b(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    grad_out: &[f32],
    tb: bool,
    b_shared: bool,
    db: &mut [f32],
) {
    if b_shared {
        // Accumulate over the batch sequentially (deterministic order).
        for bi in 0..batch {
            let a_b = &a[bi * m * k..(bi + 1) * m * k];
            let g_b = &grad_out[bi * m * n..(bi + 1) * m * n];
            if tb {
                // dB (n x k) = dC^T * A
                matmul(1, n, m, k, g_b, true, a_b, false, false, true, db);
            } else {
                // dB (k x n) = A^T * dC
                matmul(1, k, m, n, a_b, true, g_b, false, false, true, db);
            }
        }
    } else if tb {
        matmul(batch, n, m, k, grad_out, true, a, false, false, true, db);
    } else {
        matmul(batch, k, m, n, a, true, grad_out, false, false, true, db);
    }
}

// ---------------------------------------------------------------------------
// Causal 3-D convolution
// ---------------------------------------------------------------------------

/// Shape bookkeeping for a causal 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dMeta {
    pub n: usize,
    pub ic: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub st: usize,
    pub sh: usize,
    pub sw: usize,
    pub to: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv3dMeta {
    pub fn infer(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: (usize, usize, usize),
    ) -> Result<Self> {
        if input_shape.len() != 5 {
            return Err(Error::shape(format!(
                "causal_conv3d expects NCTHW input, got shape {input_shape:?}"
            )));
        }
        if weight_shape.len() != 5 {
            return Err(Error::shape(format!(
                "causal_conv3d expects OC x IC x kt x kh x kw weight, got shape {weight_shape:?}"
            )));
        }
        let (n, ic, t, h, w) =
            (input_shape[0], input_shape[1], input_shape[2], input_shape[3], input_shape[4]);
        let (oc, wic, kt, kh, kw) =
            (weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3], weight_shape[4]);
        if ic != wic {
            return Err(Error::shape(format!(
                "input has {ic} channels but weight expects {wic} (weight shape {weight_shape:?})"
            )));
        }
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel extents must be odd, got ({kt},{kh},{kw})"
            )));
        }
        let (st, sh, sw) = stride;
        if st == 0 || sh == 0 || sw == 0 {
            return Err(Error::invalid("stride components must be positive"));
        }
        if t == 0 {
            return Err(Error::shape("input temporal length must be >= 1"));
        }
        // Past-only temporal padding of kt-1 frames gives to = floor((t-1)/st)+1;
        // symmetric spatial padding of (k-1)/2 gives ho = floor((h-1)/sh)+1.
        if h % sh != 0 || w % sw != 0 {
            return Err(Error::shape(format!(
                "spatial extents ({h},{w}) must be divisible by spatial strides ({sh},{sw})"
            )));
        }
        let to = (t - 1) / st + 1;
        let ho = (h - 1) / sh + 1;
        let wo = (w - 1) / sw + 1;
        Ok(Conv3dMeta { n, ic, t, h, w, oc, kt, kh, kw, st, sh, sw, to, ho, wo })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.oc, self.to, self.ho, self.wo]
    }

    fn padded_dims(&self) -> (usize, usize, usize) {
        (self.t + self.kt - 1, self.h + self.kh - 1, self.w + self.kw - 1)
    }

    /// Pad one sample: replicate-first-frame on the past temporal side,
    /// symmetric zeros spatially.
    fn pad_input(&self, input: &[f32]) -> Vec<f32> {
        let (tp, hp, wp) = self.padded_dims();
        let ph = (self.kh - 1) / 2;
        let pw = (self.kw - 1) / 2;
        let tpad = self.kt - 1;
        let mut out = vec![0.0f32; self.n * self.ic * tp * hp * wp];
        for ni in 0..self.n {
            for ci in 0..self.ic {
                let src_base = (ni * self.ic + ci) * self.t * self.h * self.w;
                let dst_base = (ni * self.ic + ci) * tp * hp * wp;
                for tj in 0..tp {
                    let ts = tj.saturating_sub(tpad).min(self.t - 1);
                    for hj in 0..self.h {
                        let src = src_base + (ts * self.h + hj) * self.w;
                        let dst = dst_base + (tj * hp + hj + ph) * wp + pw;
                        out[dst..dst + self.w].copy_from_slice(&input[src..src + self.w]);
                    }
                }
            }
        }
        out
    }
}

pub fn conv3d_forward(
    meta: &Conv3dMeta,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let m = *meta;
    let padded = m.pad_input(input);
    let (_, hp, wp) = m.padded_dims();
    let kvol = m.kt * m.kh * m.kw;
    let plane = m.ho * m.wo;

    out.par_chunks_mut(m.to * plane).enumerate().for_each(|(chunk, out_c)| {
        let ni = chunk / m.oc;
        let oc = chunk % m.oc;
        let w_oc = &weight[oc * m.ic * kvol..(oc + 1) * m.ic * kvol];
        let b = bias.map_or(0.0, |b| b[oc]);
        out_c.fill(b);
        for ci in 0..m.ic {
            let pad_c = &padded[(ni * m.ic + ci) * (m.t + m.kt - 1) * hp * wp..];
            let w_ic = &w_oc[ci * kvol..(ci + 1) * kvol];
            for to in 0..m.to {
                for ho in 0..m.ho {
                    let out_row = &mut out_c[(to * m.ho + ho) * m.wo..(to * m.ho + ho + 1) * m.wo];
                    for ktap in 0..m.kt {
                        for khap in 0..m.kh {
                            let in_row =
                                &pad_c[((to * m.st + ktap) * hp + ho * m.sh + khap) * wp..];
                            let w_row = &w_ic[(ktap * m.kh + khap) * m.kw..];
                            for kwap in 0..m.kw {
                                let wv = w_row[kwap];
                                if m.sw == 1 {
                                    let src = &in_row[kwap..kwap + m.wo];
                                    for (o, s) in out_row.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                } else {
                                    for (woi, o) in out_row.iter_mut().enumerate() {
                                        *o += wv * in_row[woi * m.sw + kwap];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    meta: &Conv3dMeta,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    d_input: Option<&mut [f32]>,
    d_weight: Option<&mut [f32]>,
    d_bias: Option<&mut [f32]>,
) {
    let m = *meta;
    let (tp, hp, wp) = m.padded_dims();
    let kvol = m.kt * m.kh * m.kw;
    let plane = m.ho * m.wo;

    if let Some(db) = d_bias {
        for oc in 0..m.oc {
            let mut acc = 0.0f64;
            for ni in 0..m.n {
                let g = &grad_out[(ni * m.oc + oc) * m.to * plane..];
                for v in &g[..m.to * plane] {
                    acc += f64::from(*v);
                }
            }
            db[oc] += acc as f32;
        }
    }

    if d_weight.is_some() || d_input.is_some() {
        let padded = m.pad_input(input);

        if let Some(dw) = d_weight {
            dw.par_chunks_mut(m.ic * kvol).enumerate().for_each(|(oc, dw_oc)| {
                for ni in 0..m.n {
                    let g_c = &grad_out[(ni * m.oc + oc) * m.to * plane..];
                    for ci in 0..m.ic {
                        let pad_c = &padded[(ni * m.ic + ci) * tp * hp * wp..];
                        let dw_ic = &mut dw_oc[ci * kvol..(ci + 1) * kvol];
                        for to in 0..m.to {
                            for ho in 0..m.ho {
                                let g_row = &g_c[(to * m.ho + ho) * m.wo..(to * m.ho + ho + 1) * m.wo];
                                for ktap in 0..m.kt {
                                    for khap in 0..m.kh {
                                        let in_row = &pad_c
                                            [((to * m.st + ktap) * hp + ho * m.sh + khap) * wp..];
                                        for kwap in 0..m.kw {
                                            let mut acc = 0.0f32;
                                            if m.sw == 1 {
                                                let src = &in_row[kwap..kwap + m.wo];
                                                for (g, s) in g_row.iter().zip(src) {
                                                    acc += g * s;
                                                }
                                            } else {
                                                for (woi, g) in g_row.iter().enumerate() {
                                                    acc += g * in_row[woi * m.sw + kwap];
                                                }
                                            }
                                            dw_ic[(ktap * m.kh + khap) * m.kw + kwap] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }

        if let Some(di) = d_input {
            let mut d_padded = vec![0.0f32; m.n * m.ic * tp * hp * wp];
            d_padded
                .par_chunks_mut(tp * hp * wp)
                .enumerate()
                .for_each(|(chunk, dpad_c)| {
                    let ni = chunk / m.ic;
                    let ci = chunk % m.ic;
                    for oc in 0..m.oc {
                        let g_c = &grad_out[(ni * m.oc + oc) * m.to * plane..];
                        let w_ic = &weight[(oc * m.ic + ci) * kvol..(oc * m.ic + ci + 1) * kvol];
                        for to in 0..m.to {
                            for ho in 0..m.ho {
                                let g_row =
                                    &g_c[(to * m.ho + ho) * m.wo..(to * m.ho + ho + 1) * m.wo];
                                for ktap in 0..m.kt {
                                    for khap in 0..m.kh {
                                        let dpad_row = &mut dpad_c
                                            [((to * m.st + ktap) * hp + ho * m.sh + khap) * wp..];
                                        let w_row = &w_ic[(ktap * m.kh + khap) * m.kw..];
                                        for kwap in 0..m.kw {
                                            let wv = w_row[kwap];
                                            if wv == 0.0 {
                                                continue;
                                            }
                                            if m.sw == 1 {
                                                let dst = &mut dpad_row[kwap..kwap + m.wo];
                                                for (d, g) in dst.iter_mut().zip(g_row) {
                                                    *d += wv * g;
                                                }
                                            } else {
                                                for (woi, g) in g_row.iter().enumerate() {
                                                    dpad_row[woi * m.sw + kwap] += wv * g;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });

            // Fold padded gradients back: replicated past frames all map to
            // frame 0; spatial zero padding is dropped.
            let ph = (m.kh - 1) / 2;
            let pw = (m.kw - 1) / 2;
            let tpad = m.kt - 1;
            di.par_chunks_mut(m.t * m.h * m.w).enumerate().for_each(|(chunk, di_c)| {
                let dpad_c = &d_padded[chunk * tp * hp * wp..(chunk + 1) * tp * hp * wp];
                for tj in 0..tp {
                    let ts = tj.saturating_sub(tpad).min(m.t - 1);
                    for hj in 0..m.h {
                        let src = &dpad_c[(tj * hp + hj + ph) * wp + pw..];
                        let dst = &mut di_c[(ts * m.h + hj) * m.w..(ts * m.h + hj + 1) * m.w];
                        for (d, s) in dst.iter_mut().zip(&src[..m.w]) {
                            *d += s;
                        }
                    }
                }
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Row softmax (max-subtracted) with optional additive mask
// ---------------------------------------------------------------------------

pub fn softmax_rows(x: &[f32], rows: usize, cols: usize, mask: Option<&[f32]>, out: &mut [f32]) {
    for r in 0..rows {
        let xin = &x[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let mut mx = f32::NEG_INFINITY;
        for c in 0..cols {
            let v = xin[c] + mrow.map_or(0.0, |m| m[c]);
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0f32;
        for c in 0..cols {
            let v = ((xin[c] + mrow.map_or(0.0, |m| m[c])) - mx).exp();
            o[c] = v;
            sum += v;
        }
        let inv = 1.0 / sum;
        for v in o.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward of row softmax given the stored output `y`.
pub fn softmax_rows_backward(y: &[f32], grad_out: &[f32], rows: usize, cols: usize, dx: &mut [f32]) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &grad_out[r * cols..(r + 1) * cols];
        let mut dot = 0.0f32;
        for c in 0..cols {
            dot += yr[c] * gr[c];
        }
        let dr = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dr[c] += yr[c] * (gr[c] - dot);
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization over a strided axis
// ---------------------------------------------------------------------------

/// Normalize groups of `len` values spaced `stride` apart: covers trailing-axis
/// layer norm (stride = 1) and channel norm over NCTHW (stride = T*H*W).
///
/// `y = (x - mean) / sqrt(var + eps) * gain + bias` with population variance.
#[allow(clippy::too_many_arguments)]
pub fn norm_forward(
    x: &[f32],
    groups: &[(usize, usize)], // (base offset, stride) per group
    len: usize,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
    out: &mut [f32],
) {
    for &(base, stride) in groups {
        let mut mean = 0.0f64;
        for i in 0..len {
            mean += f64::from(x[base + i * stride]);
        }
        mean /= len as f64;
        let mut var = 0.0f64;
        for i in 0..len {
            let d = f64::from(x[base + i * stride]) - mean;
            var += d * d;
        }
        var /= len as f64;
        let rstd = 1.0 / (var + f64::from(eps)).sqrt();
        for i in 0..len {
            let idx = base + i * stride;
            let nv = ((f64::from(x[idx]) - mean) * rstd) as f32;
            out[idx] = nv * gain[i] + bias[i];
        }
    }
}

/// Backward of `norm_forward`. Accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn norm_backward(
    x: &[f32],
    groups: &[(usize, usize)],
    len: usize,
    gain: &[f32],
    eps: f32,
    grad_out: &[f32],
    dx: Option<&mut [f32]>,
    mut dgain: Option<&mut [f32]>,
    mut dbias: Option<&mut [f32]>,
) {
    let mut dx = dx;
    for &(base, stride) in groups {
        let mut mean = 0.0f64;
        for i in 0..len {
            mean += f64::from(x[base + i * stride]);
        }
        mean /= len as f64;
        let mut var = 0.0f64;
        for i in 0..len {
            let d = f64::from(x[base + i * stride]) - mean;
            var += d * d;
        }
        var /= len as f64;
        let rstd = (1.0 / (var + f64::from(eps)).sqrt()) as f32;

        // xhat_i = (x_i - mean) * rstd; dL/dxhat_i = g_i * gain_i
        let mut sum_g = 0.0f32;
        let mut sum_gx = 0.0f32;
        for i in 0..len {
            let idx = base + i * stride;
            let xhat = (f64::from(x[idx]) - mean) as f32 * rstd;
            let gh = grad_out[idx] * gain[i];
            sum_g += gh;
            sum_gx += gh * xhat;
            if let Some(dg) = dgain.as_deref_mut() {
                dg[i] += grad_out[idx] * xhat;
            }
            if let Some(db) = dbias.as_deref_mut() {
                db[i] += grad_out[idx];
            }
        }
        if let Some(dxs) = dx.as_deref_mut() {
            let inv_len = 1.0 / len as f32;
            for i in 0..len {
                let idx = base + i * stride;
                let xhat = (f64::from(x[idx]) - mean) as f32 * rstd;
                let gh = grad_out[idx] * gain[i];
                dxs[idx] += rstd * (gh - inv_len * (sum_g + xhat * sum_gx));
            }
        }
    }
}

/// Group descriptors for trailing-axis layer norm over `rows` rows.
pub fn rows_groups(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows).map(|r| (r * cols, 1)).collect()
}

/// Group descriptors for channel norm over an N x C x S tensor.
pub fn channel_groups(n: usize, c: usize, s: usize) -> Vec<(usize, usize)> {
    let mut g = Vec::with_capacity(n * s);
    for ni in 0..n {
        for si in 0..s {
            g.push((ni * c * s + si, s));
        }
    }
    let _ = c;
    g
}

// ---------------------------------------------------------------------------
// Haar low-pass resampling (the energy-flow pathway primitive)
// ---------------------------------------------------------------------------

/// Haar analysis low-pass along one axis of an `[outer, len, inner]` view.
/// Odd extents are padded on the front with a replicate of the first slice,
/// so `out_len = ceil(len/2)` and no coefficient ever looks ahead.
pub fn lowpass_down_axis(x: &[f32], outer: usize, len: usize, inner: usize, out: &mut [f32]) {
    let out_len = len.div_ceil(2);
    let odd = len % 2 == 1;
    for o in 0..outer {
        let xb = &x[o * len * inner..(o + 1) * len * inner];
        let ob = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
        for i in 0..out_len {
            // Odd lengths pair (2i-1, 2i) with index -1 replicated to 0, so
            // coefficient i never reads past slice 2i.
            let (ia, ib) = if odd {
                (if i == 0 { 0 } else { 2 * i - 1 }, 2 * i)
            } else {
                (2 * i, 2 * i + 1)
            };
            let ra = &xb[ia * inner..(ia + 1) * inner];
            let rb = &xb[ib * inner..(ib + 1) * inner];
            let dst = &mut ob[i * inner..(i + 1) * inner];
            for j in 0..inner {
                dst[j] = (ra[j] + rb[j]) * INV_SQRT2;
            }
        }
    }
}

/// Transpose of `lowpass_down_axis`; accumulates into `dx`.
pub fn lowpass_down_axis_backward(
    grad_out: &[f32],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [f32],
) {
    let out_len = len.div_ceil(2);
    let odd = len % 2 == 1;
    for o in 0..outer {
        let gb = &grad_out[o * out_len * inner..(o + 1) * out_len * inner];
        let db = &mut dx[o * len * inner..(o + 1) * len * inner];
        for i in 0..out_len {
            let (ia, ib) = if odd {
                (if i == 0 { 0 } else { 2 * i - 1 }, 2 * i)
            } else {
                (2 * i, 2 * i + 1)
            };
            let g = &gb[i * inner..(i + 1) * inner];
            for j in 0..inner {
                db[ia * inner + j] += g[j] * INV_SQRT2;
                db[ib * inner + j] += g[j] * INV_SQRT2;
            }
        }
    }
}

/// Haar synthesis of a low-pass-only band along one axis: each coefficient
/// spreads into two slices scaled by 1/sqrt(2). When `target_len` is odd the
/// leading synthesized slice is dropped (inverse of the replicate pad).
pub fn lowpass_up_axis(
    x: &[f32],
    outer: usize,
    len: usize,
    inner: usize,
    target_len: usize,
    out: &mut [f32],
) {
    debug_assert!(target_len == 2 * len || target_len == 2 * len - 1);
    let drop_first = target_len == 2 * len - 1;
    for o in 0..outer {
        let xb = &x[o * len * inner..(o + 1) * len * inner];
        let ob = &mut out[o * target_len * inner..(o + 1) * target_len * inner];
        for j in 0..target_len {
            let m = if drop_first { j + 1 } else { j };
            let src = &xb[(m / 2) * inner..(m / 2 + 1) * inner];
            let dst = &mut ob[j * inner..(j + 1) * inner];
            for i in 0..inner {
                dst[i] = src[i] * INV_SQRT2;
            }
        }
    }
}

pub fn lowpass_up_axis_backward(
    grad_out: &[f32],
    outer: usize,
    len: usize,
    inner: usize,
    target_len: usize,
    dx: &mut [f32],
) {
    let drop_first = target_len == 2 * len - 1;
    for o in 0..outer {
        let gb = &grad_out[o * target_len * inner..(o + 1) * target_len * inner];
        let db = &mut dx[o * len * inner..(o + 1) * len * inner];
        for j in 0..target_len {
            let m = if drop_first { j + 1 } else { j };
            let g = &gb[j * inner..(j + 1) * inner];
            let dst = &mut db[(m / 2) * inner..(m / 2 + 1) * inner];
            for i in 0..inner {
                dst[i] += g[i] * INV_SQRT2;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 3-D upsampling (causal on the temporal axis)
// ---------------------------------------------------------------------------

/// Temporal source index for nearest causal upsampling by factor `ft`:
/// output length (T-1)*ft + 1, out\[j\] = in\[ceil(j/ft)\].
pub fn upsample_tmap(j: usize, ft: usize) -> usize {
    j.div_ceil(ft)
}

#[allow(clippy::too_many_arguments)]
pub fn upsample3d_forward(
    x: &[f32],
    nc: usize,
    t: usize,
    h: usize,
    w: usize,
    ft: usize,
    fh: usize,
    fw: usize,
    out: &mut [f32],
) {
    let (to, ho, wo) = ((t - 1) * ft + 1, h * fh, w * fw);
    out.par_chunks_mut(to * ho * wo).enumerate().for_each(|(c, oc)| {
        let xc = &x[c * t * h * w..(c + 1) * t * h * w];
        for tj in 0..to {
            let ts = upsample_tmap(tj, ft);
            for hj in 0..ho {
                let hs = hj / fh;
                let src = &xc[(ts * h + hs) * w..(ts * h + hs + 1) * w];
                let dst = &mut oc[(tj * ho + hj) * wo..(tj * ho + hj + 1) * wo];
                for wj in 0..wo {
                    dst[wj] = src[wj / fw];
                }
            }
        }
    });
    let _ = nc;
}

#[allow(clippy::too_many_arguments)]
pub fn upsample3d_backward(
    grad_out: &[f32],
    nc: usize,
    t: usize,
    h: usize,
    w: usize,
    ft: usize,
    fh: usize,
    fw: usize,
    dx: &mut [f32],
) {
    let (to, ho, wo) = ((t - 1) * ft + 1, h * fh, w * fw);
    dx.par_chunks_mut(t * h * w).enumerate().for_each(|(c, dc)| {
        let gc = &grad_out[c * to * ho * wo..(c + 1) * to * ho * wo];
        for tj in 0..to {
            let ts = upsample_tmap(tj, ft);
            for hj in 0..ho {
                let hs = hj / fh;
                let g = &gc[(tj * ho + hj) * wo..(tj * ho + hj + 1) * wo];
                let dst = &mut dc[(ts * h + hs) * w..(ts * h + hs + 1) * w];
                for wj in 0..wo {
                    dst[wj / fw] += g[wj];
                }
            }
        }
    });
    let _ = nc;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_case_matches_hand_result() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0f32; 4];
        matmul(1, 2, 2, 2, &a, false, &b, false, false, false, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_storage_agrees() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut base = [0.0f32; 4];
        matmul(1, 2, 3, 2, &a, false, &b, false, false, false, &mut base);

        // a stored transposed (3x2)
        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut out = [0.0f32; 4];
        matmul(1, 2, 3, 2, &a_t, true, &b, false, false, false, &mut out);
        assert_eq!(out, base);

        // b stored transposed (2x3)
        let b_t = [1.0, -1.0, 0.0, 0.5, 2.0, 1.0];
        let mut out2 = [0.0f32; 4];
        matmul(1, 2, 3, 2, &a, false, &b_t, true, false, false, &mut out2);
        assert_eq!(out2, base);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [0.3f32, -1.0, 2.0, 0.0, 0.0, 0.0];
        let mut y = [0.0f32; 6];
        softmax_rows(&x, 2, 3, None, &mut y);
        for r in 0..2 {
            let s: f32 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // uniform row
        assert!((y[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn lowpass_down_odd_extent_is_causal_and_ceil_sized() {
        // len 5 -> 3; first output only sees slice 0.
        let x = [1.0f32, 2.0, 3.0, 4.0, 5.0];
        let mut y = [0.0f32; 3];
        lowpass_down_axis(&x, 1, 5, 1, &mut y);
        assert!((y[0] - 2.0 * INV_SQRT2).abs() < 1e-6); // (1+1)/sqrt2
        assert!((y[1] - 5.0 * INV_SQRT2).abs() < 1e-6); // (2+3)/sqrt2
        assert!((y[2] - 9.0 * INV_SQRT2).abs() < 1e-6); // (4+5)/sqrt2
    }

    #[test]
    fn lowpass_round_trip_preserves_constants() {
        let x = [3.0f32; 8];
        let mut mid = [0.0f32; 4];
        lowpass_down_axis(&x, 1, 8, 1, &mut mid);
        let mut back = [0.0f32; 8];
        lowpass_up_axis(&mid, 1, 4, 1, 8, &mut back);
        for v in back {
            assert!((v - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_temporal_map_is_causal() {
        // T=5, ft=2 -> T_out=9; out[j] reads in[ceil(j/2)] <= ceil(j/2)
        let expect = [0, 1, 1, 2, 2, 3, 3, 4, 4];
        for (j, e) in expect.iter().enumerate() {
            assert_eq!(upsample_tmap(j, 2), *e);
        }
    }

    #[test]
    fn conv_meta_shapes_follow_causal_stride_rule() {
        let m = Conv3dMeta::infer(&[1, 1, 9, 32, 32], &[4, 1, 3, 3, 3], (2, 2, 2)).unwrap();
        assert_eq!(m.out_shape(), vec![1, 4, 5, 16, 16]);
        let m2 = Conv3dMeta::infer(&[2, 3, 1, 8, 8], &[5, 3, 3, 3, 3], (1, 1, 1)).unwrap();
        assert_eq!(m2.out_shape(), vec![2, 5, 1, 8, 8]);
    }

    #[test]
    fn conv_meta_rejects_bad_shapes() {
        assert!(Conv3dMeta::infer(&[1, 2, 4, 8, 8], &[4, 3, 3, 3, 3], (1, 1, 1)).is_err());
        assert!(Conv3dMeta::infer(&[1, 2, 4, 8, 8], &[4, 2, 2, 3, 3], (1, 1, 1)).is_err());
    }
}
