//! Dense tensors, named parameter maps, and the video clip container.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Dense n-dimensional array of 32-bit reals in row-major order, with an
/// optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    /// Standard-normal tensor from a seeded generator.
    pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
    }

    /// Normal tensor with the given standard deviation.
    pub fn randn_scaled(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::randn(shape, rng);
        for v in &mut t.data {
            *v *= std;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Replace the gradient buffer; length must match the data.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor of {} elements",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Error if any stored value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Named map from parameter-path strings to tensors.
///
/// Paths are unique and iteration order is the lexicographic path order,
/// which keeps checkpoints and optimizer traversals stable.
#[derive(Debug, Clone, Default)]
pub struct LayerParams {
    map: BTreeMap<String, Tensor>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.map.contains_key(&path) {
            return Err(Error::invalid(format!("duplicate parameter path {path:?}")));
        }
        self.map.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.map
            .get(path)
            .ok_or_else(|| Error::invalid(format!("unknown parameter path {path:?}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(path)
            .ok_or_else(|| Error::invalid(format!("unknown parameter path {path:?}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Merge another parameter map under a path prefix.
    pub fn absorb(&mut self, prefix: &str, other: LayerParams) -> Result<()> {
        for (name, t) in other.map {
            self.insert(format!("{prefix}.{name}"), t)?;
        }
        Ok(())
    }

    /// Extract the subtree under `prefix.` with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> LayerParams {
        let lead = format!("{prefix}.");
        let mut out = LayerParams::new();
        for (name, t) in &self.map {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.map.insert(rest.to_string(), t.clone());
            }
        }
        out
    }
}

/// A (channels, frames, height, width) pixel tensor plus value-range metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub data: Tensor,
    /// Nominal pixel range; renderer and decoder both produce [0, 1].
    pub value_range: (f32, f32),
}

impl VideoClip {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::shape(format!(
                "video clip requires a CxTxHxW tensor, got shape {:?}",
                data.shape()
            )));
        }
        Ok(VideoClip { data, value_range: (0.0, 1.0) })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// View of one frame (c, t) as an HxW slice.
    pub fn frame(&self, c: usize, t: usize) -> &[f32] {
        let (h, w) = (self.height(), self.width());
        let off = (c * self.frames() + t) * h * w;
        &self.data.data()[off..off + h * w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_shape_is_enforced() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.set_grad(vec![1.0; 4]).is_ok());
        assert!(t.set_grad(vec![1.0; 3]).is_err());
    }

    #[test]
    fn params_reject_duplicate_paths() {
        let mut p = LayerParams::new();
        p.insert("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn params_absorb_and_extract_round_trip() {
        let mut inner = LayerParams::new();
        inner.insert("w", Tensor::full(&[2], 3.0)).unwrap();
        inner.insert("b", Tensor::full(&[1], 1.0)).unwrap();
        let mut outer = LayerParams::new();
        outer.absorb("layer", inner.clone()).unwrap();
        let back = outer.extract("layer");
        assert_eq!(back.get("w").unwrap().data(), inner.get("w").unwrap().data());
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn finite_check_flags_nan() {
        let t = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
    }
}
