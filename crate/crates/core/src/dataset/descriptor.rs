//! Differentiable hand-crafted style statistics.
//!
//! Layout of the 18 entries: RGB means (3), RGB standard deviations (3), a
//! chroma-weighted soft hue histogram (8), and mean squared responses of four
//! oriented derivative filters on luminance (4).

use std::f64::consts::TAU;

use clast_tensor::{Result, Tensor};
use serde::{Deserialize, Serialize};

pub const DESCRIPTOR_DIM: usize = 18;
pub const HUE_BINS: usize = 8;
const STD_EPS: f64 = 1e-12;
const CHROMA_EPS: f64 = 1e-8;
const HIST_EPS: f64 = 1e-9;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub hue_bins: usize,
    /// Kernel width over hue angle, radians.
    pub hue_bandwidth: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            hue_bins: HUE_BINS,
            hue_bandwidth: 0.25,
        }
    }
}

impl DescriptorConfig {
    pub fn dim(&self) -> usize {
        10 + self.hue_bins
    }
}

/// 3x3 derivative kernels at 0, 45, 90 and 135 degrees.
const ORIENTED: [[f64; 9]; 4] = [
    [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    [-2.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 2.0],
    [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    [0.0, -1.0, -2.0, 1.0, 0.0, -1.0, 2.0, 1.0, 0.0],
];

fn oriented_weight() -> Tensor {
    let mut w = Vec::with_capacity(4 * 27);
    for k in &ORIENTED {
        for l in LUMA {
            w.extend(k.iter().map(|v| v * l / 4.0));
        }
    }
    Tensor::new(w, &[4, 3, 3, 3]).expect("static shape")
}

/// Descriptors for a batch `[B, 3, H, W]`, returned as `[B, dim]`.
pub fn style_descriptor(pixels: &Tensor, cfg: &DescriptorConfig) -> Result<Tensor> {
    let s = pixels.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let flat = pixels.reshape(&[b, 3, hw])?;

    let mean = flat.mean(2, true)?;
    let centred = flat.sub(&mean)?;
    let std = centred.square().mean(2, false)?.add_scalar(STD_EPS).sqrt();
    let mean = mean.reshape(&[b, 3])?;

    // Opponent coordinates per pixel: [B, HW, 2].
    let half_sqrt3 = 3f64.sqrt() / 2.0;
    let to_ab = Tensor::new(vec![1.0, 0.0, -0.5, half_sqrt3, -0.5, -half_sqrt3], &[3, 2])?;
    let ab = flat.transpose(1, 2)?.matmul(&to_ab)?;
    let chroma = ab.square().sum(2, true)?.add_scalar(CHROMA_EPS).sqrt();
    let nb = cfg.hue_bins;
    let mut dirs = vec![0.0; 2 * nb];
    for k in 0..nb {
        let (sn, cs) = (TAU * k as f64 / nb as f64).sin_cos();
        dirs[k] = cs;
        dirs[nb + k] = sn;
    }
    let dirs = Tensor::new(dirs, &[2, nb])?;
    // cos(hue - centre_k), normalised over bins with a von Mises kernel.
    let cos_delta = ab.matmul(&dirs)?.div(&chroma)?;
    let inv_bw2 = 1.0 / (cfg.hue_bandwidth * cfg.hue_bandwidth);
    let weights = cos_delta.add_scalar(-1.0).scale(inv_bw2).softmax(2)?;
    let mass = weights.mul(&chroma)?.sum(1, false)?.add_scalar(HIST_EPS / nb as f64);
    let total = chroma.sum(1, false)?.add_scalar(HIST_EPS);
    let hist = mass.div(&total)?;

    let energy = pixels.conv2d(&oriented_weight(), 1, 0)?;
    let es = energy.shape().to_vec();
    let energy = energy.square().reshape(&[b, 4, es[2] * es[3]])?.mean(2, false)?;

    Tensor::concat(&[mean, std, hist, energy], 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(rgb: [f64; 3], size: usize) -> Tensor {
        let mut d = Vec::new();
        for v in rgb {
            d.extend(std::iter::repeat_n(v, size * size));
        }
        Tensor::new(d, &[1, 3, size, size]).unwrap()
    }

    #[test]
    fn grey_image_is_degenerate_uniform() {
        let d = style_descriptor(&solid([0.4; 3], 6), &DescriptorConfig::default()).unwrap();
        let d = d.data();
        assert_eq!(d.len(), DESCRIPTOR_DIM);
        for k in 0..3 {
            assert!((d[k] - 0.4).abs() < 1e-15);
            assert!(d[3 + k] < 1e-5);
        }
        for k in 0..HUE_BINS {
            assert!((d[6 + k] - 0.125).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!(d[14 + k].abs() < 1e-25);
        }
    }

    #[test]
    fn red_image_peaks_in_red_bin() {
        let d = style_descriptor(&solid([0.9, 0.1, 0.1], 5), &DescriptorConfig::default()).unwrap();
        let hist = &d.data()[6..14];
        let argmax = (0..8).max_by(|&a, &b| hist[a].total_cmp(&hist[b])).unwrap();
        assert_eq!(argmax, 0);
        assert!(hist[0] > 0.95);
        assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vertical_edges_respond_to_horizontal_derivative() {
        let mut d = vec![0.0; 3 * 36];
        for c in 0..3 {
            for i in 0..6 {
                for j in 3..6 {
                    d[c * 36 + i * 6 + j] = 1.0;
                }
            }
        }
        let x = Tensor::new(d, &[1, 3, 6, 6]).unwrap();
        let e = style_descriptor(&x, &DescriptorConfig::default()).unwrap();
        let e = &e.data()[14..18];
        assert!(e[0] > 0.0);
        assert!(e[2] < 1e-25);
    }
}
