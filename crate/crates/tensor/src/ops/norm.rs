use crate::error::{Result, TensorError};
use crate::shape::{check_axis, split_at_axis};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

impl Tensor {
    /// Zero-mean, unit-variance normalization over the last axis, no affine.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        if d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                msg: "empty last axis".into(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let y = if self.requires_grad() { out.clone() } else { Vec::new() };
        Ok(Tensor::from_op(out, self.shape().to_vec(), "layer_norm", &[self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        gx[r * d + i] = inv_std[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for a in 0..len {
                    let e = (x[at(a)] - m).exp();
                    out[at(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    out[at(a)] /= s;
                }
            }
        }
        let y = if self.requires_grad() { out.clone() } else { Vec::new() };
        Ok(Tensor::from_op(out, self.shape().to_vec(), "softmax", &[self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Euclidean norm along `axis`. The gradient at a zero vector is taken as zero.
    pub fn norm(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + a) * inner + i];
                    out[o * inner + i] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let norms = if self.requires_grad() { out.clone() } else { Vec::new() };
        let xc = self.clone();
        Ok(Tensor::from_op(out, shape, "norm", &[self], move || {
            Box::new(move |g, _| {
                let x = xc.data();
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            let n = norms[o * inner + i];
                            if n > 0.0 {
                                let k = (o * len + a) * inner + i;
                                gx[k] = g[o * inner + i] * x[k] / n;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// `x / (‖x‖ + eps)` along `axis`.
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Tensor> {
        let n = self.norm(axis, true)?.add_scalar(eps);
        self.div(&n)
    }

    /// Cosine similarity over the last axis: `a·b / (‖a‖‖b‖ + eps)`.
    ///
    /// Rows where both inputs are zero evaluate to 0 and log a warning.
    pub fn cosine_similarity(&self, other: &Tensor, eps: f64) -> Result<Tensor> {
        if self.rank() == 0 || other.rank() == 0 {
            return Err(TensorError::InvalidShape {
                op: "cosine_similarity",
                msg: "scalar input".into(),
            });
        }
        let dot = self.mul(other)?;
        let dot = dot.sum(dot.rank() - 1, false)?;
        let na = self.norm(self.rank() - 1, false)?;
        let nb = other.norm(other.rank() - 1, false)?;
        let denom = na.mul(&nb)?;
        if denom.data().contains(&0.0) {
            log::warn!("cosine_similarity: degenerate zero-norm input");
        }
        dot.div(&denom.add_scalar(eps))
    }
}
