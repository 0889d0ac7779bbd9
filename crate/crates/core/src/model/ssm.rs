//! Selective state-space scan with a diagonal state matrix.

use clast_tensor::{RngStream, Tensor};

use super::layers::{join, Linear, Module};
use crate::error::{ClastError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone)]
pub struct SsmParams {
    /// `[d, n]`; the state matrix is `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[d]` skip gain.
    pub d_skip: Tensor,
    /// d -> d with bias.
    pub w_delta: Linear,
    /// d -> n without bias.
    pub w_b: Linear,
    /// d -> n without bias.
    pub w_c: Linear,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new(rng: &mut RngStream, d: usize, n: usize) -> Self {
        let a_log: Vec<f64> = (0..d).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        let mut w_delta = Linear::new(rng, d, d, true);
        // Step sizes start log-uniform in [1e-3, 1e-1].
        let dt: Vec<f64> = (0..d)
            .map(|_| {
                let u = rng.uniform_range(1e-3f64.ln(), 1e-1f64.ln());
                inverse_softplus(u.exp())
            })
            .collect();
        w_delta.bias = Some(Tensor::param(dt, &[d]).expect("length d"));
        Self {
            a_log: Tensor::param(a_log, &[d, n]).expect("length d*n"),
            d_skip: Tensor::param(vec![1.0; d], &[d]).expect("length d"),
            w_delta,
            w_b: Linear::new(rng, d, n, false),
            w_c: Linear::new(rng, d, n, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }
}

impl Module for SsmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "a_log"), &self.a_log);
        f(&join(prefix, "d_skip"), &self.d_skip);
        self.w_delta.visit(&join(prefix, "w_delta"), f);
        self.w_b.visit(&join(prefix, "w_b"), f);
        self.w_c.visit(&join(prefix, "w_c"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "a_log"), &mut self.a_log);
        f(&join(prefix, "d_skip"), &mut self.d_skip);
        self.w_delta.visit_mut(&join(prefix, "w_delta"), f);
        self.w_b.visit_mut(&join(prefix, "w_b"), f);
        self.w_c.visit_mut(&join(prefix, "w_c"), f);
    }
}

/// Scans `x` of shape `[L, d]` or `[L, B, d]` along its first axis.
///
/// `h_t = exp(delta_t A) * h_{t-1} + delta_t (W_B x_t) x_t` per channel and
/// state, `y_t = (W_C x_t) . h_t + D x_t`, with `delta_t = softplus(W_delta
/// x_t + b_delta)`. The backward direction scans the reversed sequence and
/// reverses the result.
pub fn ssm_scan(x: &Tensor, p: &SsmParams, dir: Direction) -> Result<Tensor> {
    let d = p.channels();
    let shape = x.shape().to_vec();
    let (l, b) = match shape.as_slice() {
        [l, dd] if *dd == d => (*l, 1),
        [l, b, dd] if *dd == d => (*l, *b),
        _ => return Err(ClastError::Shape(format!("ssm_scan expects [L, d] or [L, B, {d}], got {shape:?}"))),
    };
    if l == 0 {
        return Err(ClastError::Shape("ssm_scan needs L >= 1".into()));
    }
    let x = x.reshape(&[l, b, d])?;
    let x = match dir {
        Direction::Forward => x,
        Direction::Backward => x.flip(0)?,
    };
    let delta = p.w_delta.forward(&x)?.softplus();
    let a = p.a_log.exp().neg();
    let bm = p.w_b.forward(&x)?;
    let cm = p.w_c.forward(&x)?;
    let y = Tensor::selective_scan(&x, &delta, &a, &bm, &cm)?.add(&x.mul(&p.d_skip)?)?;
    let y = match dir {
        Direction::Forward => y,
        Direction::Backward => y.flip(0)?,
    };
    Ok(y.reshape(&shape)?)
}

/// Step-by-step reference recurrence on plain floats, `x` is `[L, d]`.
pub fn ssm_scan_naive(x: &[f64], l: usize, p: &SsmParams, dir: Direction) -> Vec<f64> {
    let (d, n) = (p.channels(), p.state_size());
    let a_log = p.a_log.data();
    let dskip = p.d_skip.data();
    let wd = p.w_delta.weight.data();
    let bd = p.w_delta.bias.as_ref().map(|b| b.data().to_vec()).unwrap_or(vec![0.0; d]);
    let (wb, wc) = (p.w_b.weight.data(), p.w_c.weight.data());
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..l).collect(),
        Direction::Backward => (0..l).rev().collect(),
    };
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for t in order {
        let xt = &x[t * d..(t + 1) * d];
        let proj = |w: &[f64], cols: usize, j: usize| (0..d).map(|i| xt[i] * w[i * cols + j]).sum::<f64>();
        for ch in 0..d {
            let pre = proj(wd, d, ch) + bd[ch];
            let delta = if pre > 0.0 { pre + (-pre).exp().ln_1p() } else { pre.exp().ln_1p() };
            let mut acc = 0.0;
            for s in 0..n {
                let a = -a_log[ch * n + s].exp();
                let bt = proj(wb, n, s);
                let ct = proj(wc, n, s);
                let k = ch * n + s;
                h[k] = (delta * a).exp() * h[k] + delta * bt * xt[ch];
                acc += ct * h[k];
            }
            y[t * d + ch] = acc + dskip[ch] * xt[ch];
        }
    }
    y
}
