use crate::error::Result;
use crate::shape::{check_axis, split_at_axis};
use crate::tensor::Tensor;

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![], "sum_all", &[self], move || {
            Box::new(move |g, _| vec![Some(vec![g[0]; n])])
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        if inner == 1 {
            out.iter_mut().zip(x.chunks(len.max(1))).for_each(|(d, row)| *d = row.iter().sum());
        }
        for o in (0..outer).filter(|_| inner > 1) {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        Ok(Tensor::from_op(out, reduced_shape(self.shape(), axis, keepdim), "sum", &[self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    pub fn mean(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let len = self.shape()[axis].max(1) as f64;
        Ok(self.sum(axis, keepdim)?.scale(1.0 / len))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + a) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = a;
                    }
                }
            }
        }
        Ok(Tensor::from_op(out, reduced_shape(self.shape(), axis, keepdim), "max", &[self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        gx[(o * len + arg[o * inner + i]) * inner + i] = g[o * inner + i];
                    }
                }
                vec![Some(gx)]
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat() -> Tensor {
        Tensor::new(vec![1.0, 5.0, 3.0, 4.0, 2.0, 6.0], &[2, 3]).unwrap()
    }

    #[test]
    fn sums_and_means() {
        let m = mat();
        assert_eq!(m.sum(0, false).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.sum(1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(m.mean(1, false).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(m.sum_all().item(), 21.0);
    }

    #[test]
    fn max_routes_gradient() {
        let m = Tensor::param(mat().to_vec(), &[2, 3]).unwrap();
        let y = m.max(1, false).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.square().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn bad_axis() {
        assert!(mat().sum(2, false).is_err());
    }
}
