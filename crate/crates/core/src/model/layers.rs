use clast_tensor::{RngStream, Tensor};

use crate::error::Result;

/// Anything owning named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

pub fn count_params(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.numel());
    n
}

/// Re-creates every parameter as a leaf with the given gradient flag.
pub fn set_trainable(m: &mut dyn Module, flag: bool) {
    m.visit_mut("", &mut |_, t| *t = t.clone().requires_grad_(flag));
}

fn uniform_param(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    rng.uniform_tensor(shape, -bound, bound).requires_grad_(true)
}

pub fn zero_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requires_grad_(true)
}

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut RngStream, inp: usize, out: usize, bias: bool) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: uniform_param(rng, &[inp, out], bound),
            bias: bias.then(|| uniform_param(rng, &[out], bound)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.add(b)?,
            None => y,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// 3x3 convolution with bias, padding 1.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv {
    pub fn new(rng: &mut RngStream, inp: usize, out: usize, stride: usize) -> Self {
        let fan_in = (inp * 9) as f64;
        Self {
            // He-style uniform bound for the ReLU stacks.
            weight: uniform_param(rng, &[out, inp, 3, 3], (6.0 / fan_in).sqrt()),
            bias: zero_param(&[out]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.bias.numel();
        let y = x.conv2d(&self.weight, self.stride, 1)?;
        Ok(y.add(&self.bias.reshape(&[1, out, 1, 1])?)?)
    }
}

impl Module for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Two linear layers with a hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Mlp {
    pub fn new(rng: &mut RngStream, inp: usize, hidden: usize, out: usize, act: Activation) -> Self {
        Self {
            fc1: Linear::new(rng, inp, hidden, true),
            fc2: Linear::new(rng, hidden, out, true),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = match self.act {
            Activation::Tanh => h.tanh(),
            Activation::Relu => h.relu(),
        };
        self.fc2.forward(&h)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_param_count_is_d2_plus_d() {
        for d in [1, 3, 64] {
            let l = Linear::new(&mut RngStream::new(1), d, d, true);
            assert_eq!(count_params(&l), d * d + d);
        }
    }

    #[test]
    fn names_are_prefixed() {
        let m = Mlp::new(&mut RngStream::new(1), 2, 3, 4, Activation::Tanh);
        let names: Vec<String> = named_params(&m).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]);
    }
}
