//! Layer wrappers over the graph, parameter initialization, the Adam
//! optimizer, and the finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::graph::{Graph, NodeId};
use crate::tensor::{LayerParams, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Registration context: layers insert their tensors here at build time and
/// remember only their parameter paths.
pub struct ParamInit<'a> {
    pub params: &'a mut LayerParams,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(params: &'a mut LayerParams, rng: &'a mut ChaCha8Rng) -> Self {
        ParamInit { params, rng }
    }

    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data agree")
    }
}

/// Fully connected layer: `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(init: &mut ParamInit, path: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let std = (2.0 / in_dim as f32).sqrt();
        let w = init.normal(&[out_dim, in_dim], std);
        init.params.insert(format!("{path}.weight"), w)?;
        init.params.insert(format!("{path}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            w: format!("{path}.weight"),
            b: Some(format!("{path}.bias")),
            in_dim,
            out_dim,
        })
    }

    /// Weight and bias start at exact zero (identity-at-init output heads).
    pub fn init_zeroed(
        init: &mut ParamInit,
        path: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        init.params.insert(format!("{path}.weight"), Tensor::zeros(&[out_dim, in_dim]))?;
        init.params.insert(format!("{path}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            w: format!("{path}.weight"),
            b: Some(format!("{path}.bias")),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &LayerParams, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.w, params.get(&self.w)?);
        let y = g.matmul(x, w, true)?;
        match &self.b {
            Some(bname) => {
                let b = g.param(bname, params.get(bname)?);
                let out_shape = g.shape(y).to_vec();
                let mut bshape = vec![1; out_shape.len()];
                bshape[out_shape.len() - 1] = self.out_dim;
                let b = g.reshape(b, &bshape)?;
                let b = g.expand(b, &out_shape)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Causal 3-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    w: String,
    b: String,
    pub stride: (usize, usize, usize),
}

impl Conv3dLayer {
    pub fn init(
        init: &mut ParamInit,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
    ) -> Result<Self> {
        let fan_in = in_ch * kernel.0 * kernel.1 * kernel.2;
        let std = (2.0 / fan_in as f32).sqrt();
        let w = init.normal(&[out_ch, in_ch, kernel.0, kernel.1, kernel.2], std);
        init.params.insert(format!("{path}.weight"), w)?;
        init.params.insert(format!("{path}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Conv3dLayer { w: format!("{path}.weight"), b: format!("{path}.bias"), stride })
    }

    pub fn forward(&self, g: &mut Graph, params: &LayerParams, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.w, params.get(&self.w)?);
        let b = g.param(&self.b, params.get(&self.b)?);
        g.causal_conv3d(x, w, Some(b), self.stride)
    }
}

/// Learned gain/shift for a normalization op.
#[derive(Debug, Clone)]
pub struct NormLayer {
    gain: String,
    bias: String,
}

impl NormLayer {
    pub fn init(init: &mut ParamInit, path: &str, dim: usize) -> Result<Self> {
        init.params.insert(format!("{path}.gain"), Tensor::full(&[dim], 1.0))?;
        init.params.insert(format!("{path}.bias"), Tensor::zeros(&[dim]))?;
        Ok(NormLayer { gain: format!("{path}.gain"), bias: format!("{path}.bias") })
    }

    pub fn layer_norm(&self, g: &mut Graph, params: &LayerParams, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&self.gain, params.get(&self.gain)?);
        let bias = g.param(&self.bias, params.get(&self.bias)?);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    pub fn channel_norm(&self, g: &mut Graph, params: &LayerParams, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&self.gain, params.get(&self.gain)?);
        let bias = g.param(&self.bias, params.get(&self.bias)?);
        g.channel_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Layer norm without learned affine (constant gain 1, shift 0).
pub fn plain_layer_norm(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let cols = *g
        .shape(x)
        .last()
        .ok_or_else(|| Error::shape("layer_norm on rank-0"))?;
    let gain = g.input(&[cols], vec![1.0; cols])?;
    let bias = g.input(&[cols], vec![0.0; cols])?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adaptive per-parameter optimizer (Adam with bias correction).
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut LayerParams,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, t) in params.iter_mut() {
            let Some(gr) = grads.get(name) else { continue };
            if gr.len() != t.len() {
                return Err(Error::shape(format!(
                    "gradient length {} != parameter {name:?} length {}",
                    gr.len(),
                    t.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; gr.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; gr.len()]);
            let data = t.data_mut();
            for i in 0..gr.len() {
                let gi = gr[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    pub worst_param: String,
    pub per_param: BTreeMap<String, f32>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must be a pure function of the bound parameters: it reconstructs
/// the forward pass (binding params by name) and returns the scalar loss node.
/// Relative error is `|a - n| / max(|a| + |n|, 1)` per element.
pub fn finite_diff_check<F>(params: &LayerParams, h: f32, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &LayerParams) -> Result<NodeId> + Sync,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    if g.value(loss).len() != 1 {
        return Err(Error::invalid("gradient check requires a scalar loss"));
    }
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads, params);
    drop(g);

    let eval = |p: &LayerParams| -> Result<f32> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss)[0])
    };

    let mut elements: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            elements.push((name.clone(), i));
        }
    }

    let errs: Vec<(String, f32)> = elements
        .par_iter()
        .map(|(name, i)| {
            let mut p = params.clone();
            let base = p.get(name).expect("known name").data()[*i];
            p.get_mut(name).expect("known name").data_mut()[*i] = base + h;
            let fp = eval(&p).expect("forward must succeed");
            p.get_mut(name).expect("known name").data_mut()[*i] = base - h;
            let fm = eval(&p).expect("forward must succeed");
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[name][*i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            (name.clone(), rel)
        })
        .collect();

    let mut per_param: BTreeMap<String, f32> = BTreeMap::new();
    let mut max_rel_err = 0.0f32;
    let mut worst_param = String::new();
    for (name, e) in &errs {
        let entry = per_param.entry(name.clone()).or_insert(0.0);
        if *e > *entry {
            *entry = *e;
        }
        if *e > max_rel_err {
            max_rel_err = *e;
            worst_param = name.clone();
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_param, per_param, elements_checked: elements.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use std::sync::Arc;

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut params = LayerParams::new();
        params.insert("x", Tensor::full(&[4], 3.0)).unwrap();
        let mut opt = Adam::new(0.1);
        let loss_of =
            |p: &LayerParams| -> f32 { p.get("x").unwrap().data().iter().map(|v| v * v).sum() };
        let start = loss_of(&params);
        for _ in 0..100 {
            let g: Vec<f32> = params.get("x").unwrap().data().iter().map(|v| 2.0 * v).collect();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), g);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(loss_of(&params) < 0.01 * start);
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = rng_for(11, "gradcheck-linear");
        let mut params = LayerParams::new();
        let lin = {
            let mut init = ParamInit::new(&mut params, &mut rng);
            Linear::init(&mut init, "lin", 3, 2).unwrap()
        };
        let x = Tensor::randn(&[4, 3], &mut rng);
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let xin = g.input_tensor(&x);
            let y = lin.forward(g, p, xin)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "linear grad check failed: {rep:?}");
    }

    #[test]
    fn gelu_gradcheck() {
        let mut rng = rng_for(12, "gradcheck-gelu");
        let mut params = LayerParams::new();
        params.insert("x", Tensor::randn(&[16], &mut rng)).unwrap();
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let x = g.param("x", p.get("x")?);
            let y = g.gelu(x);
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "gelu grad check failed: {rep:?}");
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = rng_for(13, "gradcheck-ln");
        let mut params = LayerParams::new();
        params.insert("x", Tensor::randn(&[3, 5], &mut rng)).unwrap();
        params.insert("gain", Tensor::randn_scaled(&[5], 0.3, &mut rng)).unwrap();
        params.insert("bias", Tensor::randn_scaled(&[5], 0.3, &mut rng)).unwrap();
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let x = g.param("x", p.get("x")?);
            let gain = g.param("gain", p.get("gain")?);
            let bias = g.param("bias", p.get("bias")?);
            let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "layer_norm grad check failed: {rep:?}");
    }

    #[test]
    fn channel_norm_gradcheck() {
        let mut rng = rng_for(14, "gradcheck-cn");
        let mut params = LayerParams::new();
        params.insert("x", Tensor::randn(&[2, 3, 2, 2, 2], &mut rng)).unwrap();
        params.insert("gain", Tensor::full(&[3], 1.2)).unwrap();
        params.insert("bias", Tensor::full(&[3], -0.1)).unwrap();
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let x = g.param("x", p.get("x")?);
            let gain = g.param("gain", p.get("gain")?);
            let bias = g.param("bias", p.get("bias")?);
            let y = g.channel_norm(x, gain, bias, LAYER_NORM_EPS)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "channel_norm grad check failed: {rep:?}");
    }

    #[test]
    fn conv3d_gradcheck_with_stride() {
        let mut rng = rng_for(15, "gradcheck-conv");
        let mut params = LayerParams::new();
        params.insert("x", Tensor::randn(&[1, 2, 3, 4, 4], &mut rng)).unwrap();
        params.insert("w", Tensor::randn_scaled(&[3, 2, 3, 3, 3], 0.3, &mut rng)).unwrap();
        params.insert("b", Tensor::randn_scaled(&[3], 0.3, &mut rng)).unwrap();
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let x = g.param("x", p.get("x")?);
            let w = g.param("w", p.get("w")?);
            let b = g.param("b", p.get("b")?);
            let y = g.causal_conv3d(x, w, Some(b), (2, 2, 2))?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "conv3d grad check failed: {rep:?}");
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = rng_for(16, "gradcheck-attn");
        let mut params = LayerParams::new();
        params.insert("q", Tensor::randn(&[1, 2, 3, 4], &mut rng)).unwrap();
        params.insert("k", Tensor::randn(&[1, 2, 5, 4], &mut rng)).unwrap();
        params.insert("v", Tensor::randn(&[1, 2, 5, 4], &mut rng)).unwrap();
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let q = g.param("q", p.get("q")?);
            let k = g.param("k", p.get("k")?);
            let v = g.param("v", p.get("v")?);
            let y = g.attention(q, k, v)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "attention grad check failed: {rep:?}");
    }

    #[test]
    fn softmax_masked_gradcheck() {
        let mut rng = rng_for(17, "gradcheck-softmax");
        let mut params = LayerParams::new();
        params.insert("x", Tensor::randn(&[3, 4], &mut rng)).unwrap();
        let mask = Arc::new(vec![
            0.0f32, 0.0, -1e9, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            -1e9, 0.0, 0.0, -1e9,
        ]);
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let x = g.param("x", p.get("x")?);
            let y = g.softmax(x, Some(mask.clone()))?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "masked softmax grad check failed: {rep:?}");
    }

    #[test]
    fn lowpass_and_upsample_gradcheck() {
        let mut rng = rng_for(18, "gradcheck-lowpass");
        let mut params = LayerParams::new();
        params.insert("x", Tensor::randn(&[1, 2, 5, 4, 4], &mut rng)).unwrap();
        params.insert("z", Tensor::randn(&[1, 2, 3, 2, 2], &mut rng)).unwrap();
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let x = g.param("x", p.get("x")?);
            let z = g.param("z", p.get("z")?);
            let down = g.lowpass_down(x, [true, true, true])?; // (5,4,4) -> (3,2,2)
            let up = g.lowpass_up(z, [true, true, true], (5, 4, 4))?;
            let us = g.upsample3d(down, (2, 2, 2))?; // (3,2,2) -> (5,4,4)
            let both = g.add(us, up)?;
            let sq = g.mul(both, both)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "lowpass/upsample grad check failed: {rep:?}");
    }

    #[test]
    fn bce_and_embedding_gradcheck() {
        let mut rng = rng_for(19, "gradcheck-bce");
        let mut params = LayerParams::new();
        params.insert("table", Tensor::randn(&[5, 3], &mut rng)).unwrap();
        let targets = Arc::new(vec![1.0f32, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let ids = Arc::new(vec![0u32, 3]);
        let rep = finite_diff_check(&params, 1e-3, |g, p| {
            let table = g.param("table", p.get("table")?);
            let e = g.embedding(table, ids.clone())?;
            g.bce_with_logits(e, targets.clone())
        })
        .unwrap();
        assert!(rep.passes(1e-3), "bce/embedding grad check failed: {rep:?}");
    }
}
