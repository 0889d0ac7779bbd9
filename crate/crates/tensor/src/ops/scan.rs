use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

impl Tensor {
    /// First-order linear recurrence along the leading axis:
    /// `h[t] = decay[t] * h[t-1] + input[t]`, with `h[-1] = 0`.
    ///
    /// The pair `(decay, input)` composes associatively, so this is the
    /// cumulative scan the selective state-space layer is built on.
    pub fn linear_recurrence(decay: &Tensor, input: &Tensor) -> Result<Tensor> {
        if decay.shape() != input.shape() || decay.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "linear_recurrence",
                lhs: decay.shape().to_vec(),
                rhs: input.shape().to_vec(),
            });
        }
        let steps = decay.shape()[0];
        let width = decay.numel() / steps.max(1);
        let (a, b) = (decay.data(), input.data());
        let mut h = vec![0.0; a.len()];
        if steps > 0 {
            h[..width].copy_from_slice(&b[..width]);
        }
        for t in 1..steps {
            let (prev, cur) = h.split_at_mut(t * width);
            let prev = &prev[(t - 1) * width..];
            let cur = &mut cur[..width];
            let at = &a[t * width..(t + 1) * width];
            let bt = &b[t * width..(t + 1) * width];
            for j in 0..width {
                cur[j] = at[j] * prev[j] + bt[j];
            }
        }
        let states = if decay.requires_grad() { h.clone() } else { Vec::new() };
        let ac = decay.clone();
        Ok(Tensor::from_op(h, decay.shape().to_vec(), "linear_recurrence", &[decay, input], move || {
            Box::new(move |g, needs| {
                let a = ac.data();
                // adjoint[t] = g[t] + decay[t+1] * adjoint[t+1]
                let mut adj = vec![0.0; g.len()];
                if steps > 0 {
                    let last = (steps - 1) * width;
                    adj[last..].copy_from_slice(&g[last..]);
                }
                for t in (0..steps.saturating_sub(1)).rev() {
                    for j in 0..width {
                        let k = t * width + j;
                        adj[k] = g[k] + a[k + width] * adj[k + width];
                    }
                }
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; g.len()];
                    for t in 1..steps {
                        for j in 0..width {
                            let k = t * width + j;
                            ga[k] = adj[k] * states[k - width];
                        }
                    }
                    ga
                });
                vec![ga, needs[1].then_some(adj)]
            })
        }))
    }
}

struct ScanDims {
    l: usize,
    b: usize,
    d: usize,
    n: usize,
}

/// States `h[t, b, c, s]` of the selective recurrence, flattened.
fn selective_states(dims: &ScanDims, x: &[f64], delta: &[f64], a: &[f64], bm: &[f64]) -> Vec<f64> {
    let ScanDims { l, b, d, n } = *dims;
    let width = b * d * n;
    let mut h = vec![0.0; l * width];
    for t in 0..l {
        let (prev, cur) = h.split_at_mut(t * width);
        let prev = (t > 0).then(|| &prev[(t - 1) * width..]);
        for bi in 0..b {
            let row = (t * b + bi) * d;
            let brow = &bm[(t * b + bi) * n..][..n];
            for c in 0..d {
                let (dt, xv) = (delta[row + c], x[row + c]);
                let ac = &a[c * n..][..n];
                let off = (bi * d + c) * n;
                let hc = &mut cur[off..off + n];
                for s in 0..n {
                    let carry = prev.map_or(0.0, |p| (dt * ac[s]).exp() * p[off + s]);
                    hc[s] = carry + dt * brow[s] * xv;
                }
            }
        }
    }
    h
}

impl Tensor {
    /// Fused selective state-space scan along the leading axis.
    ///
    /// With `x, delta: [L, B, d]`, `a: [d, n]` and `b_in, c_out: [L, B, n]`:
    /// `h_t = exp(delta_t a) * h_{t-1} + delta_t b_in_t x_t` per channel and
    /// state, and `y_t = sum_s c_out_t h_t`, returned as `[L, B, d]`. Unlike
    /// composing [`Tensor::linear_recurrence`] with broadcasts, no `[L, B, d, n]`
    /// tensor is kept; the backward pass recomputes the states.
    pub fn selective_scan(x: &Tensor, delta: &Tensor, a: &Tensor, b_in: &Tensor, c_out: &Tensor) -> Result<Tensor> {
        let bad = |rhs: &Tensor| TensorError::ShapeMismatch {
            op: "selective_scan",
            lhs: x.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        let &[l, b, d] = x.shape() else { return Err(bad(x)) };
        if delta.shape() != x.shape() {
            return Err(bad(delta));
        }
        let &[da, n] = a.shape() else { return Err(bad(a)) };
        if da != d {
            return Err(bad(a));
        }
        for t in [b_in, c_out] {
            if t.shape() != [l, b, n] {
                return Err(bad(t));
            }
        }
        let dims = ScanDims { l, b, d, n };
        let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b_in.data(), c_out.data());
        let mut y = vec![0.0; l * b * d];
        // Forward keeps one state slice per (batch, channel).
        let mut h = vec![0.0; b * d * n];
        for t in 0..l {
            for bi in 0..b {
                let row = (t * b + bi) * d;
                let brow = &bd[(t * b + bi) * n..][..n];
                let crow = &cd[(t * b + bi) * n..][..n];
                for c in 0..d {
                    let (dt, xv) = (dd[row + c], xd[row + c]);
                    let ac = &ad[c * n..][..n];
                    let hc = &mut h[(bi * d + c) * n..][..n];
                    let mut acc = 0.0;
                    for s in 0..n {
                        hc[s] = (dt * ac[s]).exp() * hc[s] + dt * brow[s] * xv;
                        acc += crow[s] * hc[s];
                    }
                    y[row + c] = acc;
                }
            }
        }
        let saved = [x.clone(), delta.clone(), a.clone(), b_in.clone(), c_out.clone()];
        Ok(Tensor::from_op(y, vec![l, b, d], "selective_scan", &[x, delta, a, b_in, c_out], move || {
            Box::new(move |g, needs| {
                let [x, delta, a, b_in, c_out] = &saved;
                let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b_in.data(), c_out.data());
                let h = selective_states(&dims, xd, dd, ad, bd);
                let width = b * d * n;
                let mut gx = vec![0.0; l * b * d];
                let mut gdelta = vec![0.0; l * b * d];
                let mut ga = vec![0.0; d * n];
                let mut gb = vec![0.0; l * b * n];
                let mut gc = vec![0.0; l * b * n];
                // lam = dLoss/dh_t, carried backwards in time.
                let mut lam = vec![0.0; width];
                for t in (0..l).rev() {
                    for bi in 0..b {
                        let row = (t * b + bi) * d;
                        let nrow = (t * b + bi) * n;
                        for c in 0..d {
                            let (dt, xv, gy) = (dd[row + c], xd[row + c], g[row + c]);
                            let off = (bi * d + c) * n;
                            let ht = &h[t * width + off..][..n];
                            for s in 0..n {
                                let ac = ad[c * n + s];
                                // Carry from step t+1 into lam_t.
                                let next = if t + 1 < l {
                                    let dn = dd[row + b * d + c];
                                    (dn * ac).exp() * lam[off + s]
                                } else {
                                    0.0
                                };
                                let lt = gy * cd[nrow + s] + next;
                                lam[off + s] = lt;
                                gc[nrow + s] += gy * ht[s];
                                let bs = bd[nrow + s];
                                gx[row + c] += lt * dt * bs;
                                gb[nrow + s] += lt * dt * xv;
                                let mut gdt = lt * bs * xv;
                                if t > 0 {
                                    let hp = h[(t - 1) * width + off + s];
                                    let decay = (dt * ac).exp();
                                    gdt += lt * hp * decay * ac;
                                    ga[c * n + s] += lt * hp * decay * dt;
                                }
                                gdelta[row + c] += gdt;
                            }
                        }
                    }
                }
                vec![
                    needs[0].then_some(gx),
                    needs[1].then_some(gdelta),
                    needs[2].then_some(ga),
                    needs[3].then_some(gb),
                    needs[4].then_some(gc),
                ]
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_loop() {
        let a = Tensor::new(vec![0.5, 0.9, 0.1, 0.2, 0.3, 0.4], &[3, 2]).unwrap();
        let b = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let h = Tensor::linear_recurrence(&a, &b).unwrap();
        let expect = [1.0, 2.0, 0.1 + 3.0, 0.4 + 4.0, 0.3 * 3.1 + 5.0, 0.4 * 4.4 + 6.0];
        for (x, y) in h.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selective_scan_matches_composed_ops() {
        let mut rng = crate::RngStream::new(3);
        let (l, b, d, n) = (5, 2, 3, 4);
        let x = rng.normal_tensor(&[l, b, d], 1.0);
        let delta = rng.uniform_tensor(&[l, b, d], 0.01, 0.5);
        let a = rng.uniform_tensor(&[d, n], -2.0, -0.1);
        let bm = rng.normal_tensor(&[l, b, n], 1.0);
        let cm = rng.normal_tensor(&[l, b, n], 1.0);
        let fused = Tensor::selective_scan(&x, &delta, &a, &bm, &cm).unwrap();
        let d4 = delta.reshape(&[l, b, d, 1]).unwrap();
        let decay = d4.mul(&a).unwrap().exp();
        let drive = d4
            .mul(&bm.reshape(&[l, b, 1, n]).unwrap())
            .unwrap()
            .mul(&x.reshape(&[l, b, d, 1]).unwrap())
            .unwrap();
        let h = Tensor::linear_recurrence(&decay, &drive).unwrap();
        let y = h.mul(&cm.reshape(&[l, b, 1, n]).unwrap()).unwrap().sum(3, false).unwrap();
        for (p, q) in fused.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(Tensor::selective_scan(&x, &delta, &a, &cm, &bm.reshape(&[l, b * n]).unwrap()).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(Tensor::linear_recurrence(&a, &b).is_err());
    }
}
