use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn spatial(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(TensorError::InvalidShape {
            op,
            msg: format!("expected [B,C,H,W], got {:?}", t.shape()),
        });
    }
    let s = t.shape();
    Ok((s[0] * s[1], s[2], s[3]))
}

impl Tensor {
    /// Non-overlapping `factor`×`factor` average pooling.
    pub fn avg_pool2d(&self, factor: usize) -> Result<Tensor> {
        let (planes, h, w) = spatial(self, "avg_pool2d")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2d",
                msg: format!("{h}x{w} not divisible by {factor}"),
            });
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let x = self.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / factor) * ow + xx / factor] += x[(p * h + y) * w + xx] * inv;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[2] = oh;
        shape[3] = ow;
        Ok(Tensor::from_op(out, shape, "avg_pool2d", &[self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(p * h + y) * w + xx] = g[(p * oh + y / factor) * ow + xx / factor] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(&self, factor: usize) -> Result<Tensor> {
        let (planes, h, w) = spatial(self, "upsample_nearest2d")?;
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = x[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[2] = oh;
        shape[3] = ow;
        Ok(Tensor::from_op(out, shape, "upsample_nearest2d", &[self], move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }
}
