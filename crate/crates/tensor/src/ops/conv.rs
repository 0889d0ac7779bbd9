use crate::error::{Result, TensorError};
use crate::ops::matmul::{gemm, MatView};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(img: &[f64], geo: &Geometry, cols: &mut [f64]) {
    let Geometry { channels, height, width, kernel, stride, pad, out_h, out_w } = *geo;
    let ncol = out_h * out_w;
    for c in 0..channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * height + iy as usize) * width..][..width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geo: &Geometry, img: &mut [f64]) {
    let Geometry { channels, height, width, kernel, stride, pad, out_h, out_w } = *geo;
    let ncol = out_h * out_w;
    for c in 0..channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * height + iy as usize) * width..][..width];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < width as isize {
                            dst[ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Zero-padded cross-correlation of `[B, C, H, W]` with `[O, C, k, k]`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let err = |msg: String| TensorError::InvalidShape { op: "conv2d", msg };
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(err(format!(
                "expected [B,C,H,W] and [O,C,k,k], got {:?} and {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(err(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(err(format!("stride must be 1 or 2, got {stride}")));
        }
        if kh > h + 2 * pad || kh > w + 2 * pad {
            return Err(err(format!("kernel {kh} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad)));
        }
        let geo = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kh) / stride + 1,
        };
        let (rows, ncol) = (geo.col_rows(), geo.col_cols());
        let img_len = c * h * w;
        let mut out = vec![0.0; b * o * ncol];
        let mut cols = vec![0.0; rows * ncol];
        let wv = MatView::new(weight.data(), o, rows);
        for bi in 0..b {
            im2col(&self.data()[bi * img_len..(bi + 1) * img_len], &geo, &mut cols);
            gemm(wv, MatView::new(&cols, rows, ncol), &mut out[bi * o * ncol..(bi + 1) * o * ncol], 0.0);
        }
        let (xc, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(out, vec![b, o, geo.out_h, geo.out_w], "conv2d", &[self, weight], move || {
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; xc.numel()]);
                let mut gw = needs[1].then(|| vec![0.0; wt.numel()]);
                let mut cols = vec![0.0; rows * ncol];
                let wv = MatView::new(wt.data(), o, rows);
                for bi in 0..b {
                    let gy = MatView::new(&g[bi * o * ncol..(bi + 1) * o * ncol], o, ncol);
                    if let Some(gw) = gw.as_mut() {
                        im2col(&xc.data()[bi * img_len..(bi + 1) * img_len], &geo, &mut cols);
                        gemm(gy, MatView::new(&cols, rows, ncol).t(), gw, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(wv.t(), gy, &mut cols, 0.0);
                        col2im(&cols, &geo, &mut gx[bi * img_len..(bi + 1) * img_len]);
                    }
                }
                vec![gx, gw]
            })
        }))
    }
}
