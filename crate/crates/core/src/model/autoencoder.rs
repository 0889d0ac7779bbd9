//! Convolutional content encoder and its mirrored decoder.

use clast_tensor::{RngStream, Tensor};

use super::layers::{join, Conv, Module};
use crate::error::{ClastError, Result};

/// Activations at the four tap points: after each conv block, plus a 2x
/// average-pooled bottleneck.
#[derive(Debug, Clone)]
pub struct Features {
    pub taps: Vec<Tensor>,
}

impl Features {
    /// Output of the last conv block, the map the fusion stack consumes.
    pub fn bottleneck(&self) -> &Tensor {
        &self.taps[2]
    }

    /// Taps used by the content loss: blocks 2 and 3.
    pub fn content_taps(&self) -> &[Tensor] {
        &self.taps[1..3]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
}

impl Encoder {
    pub fn new(rng: &mut RngStream, channels: usize) -> Self {
        Self {
            conv1: Conv::new(rng, 3, 16, 1),
            conv2: Conv::new(rng, 16, 32, 2),
            conv3: Conv::new(rng, 32, channels, 2),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv3.bias.numel()
    }

    /// `[B, 3, H, W]` with H, W multiples of 8.
    pub fn features(&self, x: &Tensor) -> Result<Features> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) {
            return Err(ClastError::Shape(format!("encoder expects [B, 3, 8k, 8k], got {s:?}")));
        }
        let f1 = self.conv1.forward(x)?.relu();
        let f2 = self.conv2.forward(&f1)?.relu();
        let f3 = self.conv3.forward(&f2)?.relu();
        let f4 = f3.avg_pool2d(2)?;
        Ok(Features {
            taps: vec![f1, f2, f3, f4],
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let f1 = self.conv1.forward(x)?.relu();
        let f2 = self.conv2.forward(&f1)?.relu();
        Ok(self.conv3.forward(&f2)?.relu())
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
}

impl Decoder {
    pub fn new(rng: &mut RngStream, channels: usize) -> Self {
        Self {
            conv1: Conv::new(rng, channels, 32, 1),
            conv2: Conv::new(rng, 32, 16, 1),
            conv3: Conv::new(rng, 16, 3, 1),
        }
    }

    /// `[B, d, h, w]` to `[B, 3, 4h, 4w]` in `(0, 1)`.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let x = self.conv1.forward(&f.upsample_nearest2d(2)?)?.relu();
        let x = self.conv2.forward(&x.upsample_nearest2d(2)?)?.relu();
        Ok(self.conv3.forward(&x)?.sigmoid())
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_shape_and_range() {
        let mut rng = RngStream::new(3);
        let enc = Encoder::new(&mut rng, 8);
        let dec = Decoder::new(&mut rng, 8);
        let x = rng.uniform_tensor(&[2, 3, 16, 16], 0.0, 1.0);
        let f = enc.features(&x).unwrap();
        assert_eq!(f.taps[0].shape(), &[2, 16, 16, 16]);
        assert_eq!(f.taps[1].shape(), &[2, 32, 8, 8]);
        assert_eq!(f.bottleneck().shape(), &[2, 8, 4, 4]);
        assert_eq!(f.taps[3].shape(), &[2, 8, 2, 2]);
        let y = dec.decode(f.bottleneck()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(enc.features(&rng.uniform_tensor(&[1, 3, 12, 12], 0.0, 1.0)).is_err());
    }
}
