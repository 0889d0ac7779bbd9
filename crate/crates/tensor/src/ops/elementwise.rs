use crate::error::Result;
use crate::shape::{broadcast_strides, for_each_broadcast, for_each_run, numel, reduce_to_shape, try_broadcast};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Softplus,
    Tanh,
    Relu,
    Negate,
    Scale(f64),
    AddScalar(f64),
    Sqrt,
    Square,
    Abs,
    Sigmoid,
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::Negate => "negate",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::AddScalar(_) => "add_scalar",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Abs => "abs",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Elu => "elu",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Negate => -x,
            UnaryOp::Scale(c) => c * x,
            UnaryOp::AddScalar(c) => x + c,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Negate => -1.0,
            UnaryOp::Scale(c) => c,
            UnaryOp::AddScalar(_) => 1.0,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

/// Dispatches a unary op when `b` is `None`, a broadcasting binary op otherwise.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op, b) {
        (ElementwiseOp::Unary(u), _) => Ok(unary(a, u)),
        (ElementwiseOp::Binary(bin), Some(b)) => binary(a, b, bin),
        (ElementwiseOp::Binary(_), None) => Err(crate::TensorError::InvalidShape {
            op: "elementwise",
            msg: "binary op needs a second operand".into(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl From<UnaryOp> for ElementwiseOp {
    fn from(op: UnaryOp) -> Self {
        ElementwiseOp::Unary(op)
    }
}

impl From<BinaryOp> for ElementwiseOp {
    fn from(op: BinaryOp) -> Self {
        ElementwiseOp::Binary(op)
    }
}

pub(crate) fn unary(a: &Tensor, op: UnaryOp) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|&x| op.apply(x)).collect();
    let saved_in = a.clone();
    let out_copy = if a.requires_grad() { out.clone() } else { Vec::new() };
    Tensor::from_op(out, a.shape().to_vec(), op.name(), &[a], move || {
        Box::new(move |g, _| {
            let x = saved_in.data();
            let grad = g
                .iter()
                .zip(x)
                .zip(&out_copy)
                .map(|((g, &x), &y)| g * op.derivative(x, y))
                .collect();
            vec![Some(grad)]
        })
    })
}

pub(crate) fn binary(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    };
    let out_shape = try_broadcast(name, a.shape(), b.shape())?;
    let f = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    };
    let (ad, bd) = (a.data(), b.data());
    let out = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let mut out = Vec::with_capacity(numel(&out_shape));
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        for_each_run(&out_shape, &sa, &sb, |i, j, len, la, lb| match (la, lb) {
            (1, 1) => out.extend(ad[i..i + len].iter().zip(&bd[j..j + len]).map(|(&x, &y)| f(x, y))),
            (1, 0) => out.extend(ad[i..i + len].iter().map(|&x| f(x, bd[j]))),
            (0, 1) => out.extend(bd[j..j + len].iter().map(|&y| f(ad[i], y))),
            _ => out.extend((0..len).map(|k| f(ad[i + k * la], bd[j + k * lb]))),
        });
        out
    };
    let (ac, bc, os) = (a.clone(), b.clone(), out_shape.clone());
    Ok(Tensor::from_op(out, out_shape, name, &[a, b], move || {
        Box::new(move |g, needs| {
            let (ad, bd) = (ac.data(), bc.data());
            let sa = broadcast_strides(ac.shape(), &os);
            let sb = broadcast_strides(bc.shape(), &os);
            let mut ga = needs[0].then(|| vec![0.0; g.len()]);
            let mut gb = needs[1].then(|| vec![0.0; g.len()]);
            for_each_broadcast(&os, &sa, &sb, |o, i, j| {
                let (da, db) = match op {
                    BinaryOp::Add => (g[o], g[o]),
                    BinaryOp::Sub => (g[o], -g[o]),
                    BinaryOp::Mul => (g[o] * bd[j], g[o] * ad[i]),
                    BinaryOp::Div => (g[o] / bd[j], -g[o] * ad[i] / (bd[j] * bd[j])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[o] = da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[o] = db;
                }
            });
            vec![
                ga.map(|ga| reduce_to_shape(&ga, &os, ac.shape())),
                gb.map(|gb| reduce_to_shape(&gb, &os, bc.shape())),
            ]
        })
    }))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinaryOp::Div)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, UnaryOp::Exp)
    }

    pub fn log(&self) -> Tensor {
        unary(self, UnaryOp::Log)
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, UnaryOp::Softplus)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, UnaryOp::Tanh)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, UnaryOp::Relu)
    }

    pub fn neg(&self) -> Tensor {
        unary(self, UnaryOp::Negate)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, UnaryOp::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, UnaryOp::AddScalar(c))
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, UnaryOp::Sqrt)
    }

    pub fn square(&self) -> Tensor {
        unary(self, UnaryOp::Square)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, UnaryOp::Abs)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, UnaryOp::Sigmoid)
    }

    pub fn elu(&self) -> Tensor {
        unary(self, UnaryOp::Elu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_exp() {
        let a = Tensor::from_slice(&[1.0, 2.0]);
        let b = Tensor::from_slice(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(Tensor::from_slice(&[0.0]).exp().data(), &[1.0]);
    }

    #[test]
    fn product_rule() {
        let a = Tensor::param(vec![2.0], &[1]).unwrap();
        let b = Tensor::from_slice(&[3.0]);
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = Tensor::param(vec![1.0; 6], &[2, 3]).unwrap();
        let b = Tensor::param(vec![0.0; 3], &[3]).unwrap();
        a.add(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0; 3]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn invalid_log_is_detectable() {
        let y = Tensor::from_slice(&[-1.0]).log();
        assert!(y.data()[0].is_nan());
        assert!(y.assert_finite("log").is_err());
    }

    #[test]
    fn softplus_is_stable() {
        let y = Tensor::from_slice(&[-800.0, 0.0, 800.0]).softplus();
        assert!(y.is_finite());
        assert!((y.data()[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.data()[2], 800.0);
    }

    #[test]
    fn dispatcher_matches_methods() {
        let a = Tensor::from_slice(&[0.5, -1.5]);
        let b = Tensor::from_slice(&[2.0, 4.0]);
        let via = elementwise(BinaryOp::Div.into(), &a, Some(&b)).unwrap();
        assert_eq!(via.data(), a.div(&b).unwrap().data());
        let via = elementwise(UnaryOp::Tanh.into(), &a, None).unwrap();
        assert_eq!(via.data(), a.tanh().data());
        assert!(elementwise(BinaryOp::Add.into(), &a, None).is_err());
    }
}
