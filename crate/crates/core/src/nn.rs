//! Parameter trees and the small layers shared by the backbone, experts and heads.

use rand::Rng;

use crate::error::{ClaspError, Result};
use crate::tensor::{gelu, gelu_grad, mat_vec_acc, outer_acc, vec_mat_acc, Tensor};

/// A fixed, ordered tree of named trainable tensors. Gradients use the same
/// type as the parameters they belong to.
pub trait ParamTree {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(0.0));
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Squared L2 norm over every tensor.
    fn sq_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `dst ← m·dst + (1−m)·src` over two trees of identical structure.
pub fn ema_into<T: ParamTree>(dst: &mut T, src: &T, momentum: f64) -> Result<()> {
    let src_list = src.named_tensors();
    let mut dst_list = dst.named_tensors_mut();
    if src_list.len() != dst_list.len() {
        return Err(ClaspError::Structural(format!(
            "parameter trees differ in size: {} vs {}",
            dst_list.len(),
            src_list.len()
        )));
    }
    for ((dn, d), (sn, s)) in dst_list.iter_mut().zip(&src_list) {
        if dn != sn || d.shape() != s.shape() {
            return Err(ClaspError::Structural(format!("{dn} {:?} vs {sn} {:?}", d.shape(), s.shape())));
        }
    }
    for ((_, d), (_, s)) in dst_list.iter_mut().zip(&src_list) {
        for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

/// `dst += alpha·src` over two trees of identical structure.
pub fn axpy_tree<T: ParamTree>(dst: &mut T, alpha: f64, src: &T) {
    let src_list = src.named_tensors();
    for ((_, d), (_, s)) in dst.named_tensors_mut().into_iter().zip(src_list) {
        d.axpy(alpha, s);
    }
}

/// Affine map `y = xᵀW + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Gaussian weights with the given std, zero bias.
    pub fn randn<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.data().to_vec();
        vec_mat_acc(x, &self.weight, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        outer_acc(&mut grad.weight, x, dy);
        for (g, d) in grad.bias.data_mut().iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; x.len()];
        mat_vec_acc(&self.weight, dy, &mut dx);
        dx
    }
}

impl ParamTree for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Perceptron with GELU between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Layer widths `dims[0] → dims[1] → …`, weights ~ N(0, 1/fan_in).
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::randn(w[0], w[1], 1.0 / (w[0] as f64).sqrt(), rng))
            .collect();
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if i < last { z.iter().map(|&v| gelu(v)).collect() } else { z.clone() };
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = dy.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                for (dv, z) in d.iter_mut().zip(&cache.pre[i]) {
                    *dv *= gelu_grad(*z);
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl ParamTree for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}
