//! Stylisation network: conv encoder, fusion stack, mirrored decoder.

pub mod autoencoder;
pub mod checkpoint;
pub mod fusion;
pub mod layers;
pub mod ssm;

use clast_tensor::{RngStream, Tensor};

pub use autoencoder::{Decoder, Encoder, Features};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use fusion::{Fusion, FusionDims, FusionKind};
pub use layers::{count_params, named_params, set_trainable, Module};
pub use ssm::{ssm_scan, ssm_scan_naive, Direction, SsmParams};

use crate::config::ModelConfig;
use crate::dataset::{AnchorTable, ImageSample, JointEncoder, Role};
use crate::error::{ClastError, Result};

#[derive(Debug, Clone)]
pub struct StyleNet {
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl StyleNet {
    pub fn new(cfg: &ModelConfig, embed_dim: usize, rng: &mut RngStream) -> Self {
        let d = cfg.channels;
        let dims = FusionDims {
            channels: d,
            state_size: cfg.state_size,
            embed_dim,
            cond_hidden: cfg.cond_hidden(),
        };
        let encoder = Encoder::new(&mut rng.split(0), d);
        let decoder = Decoder::new(&mut rng.split(1), d);
        let fusion = Fusion::new(&mut rng.split(2), cfg.variant, dims, cfg.depth);
        Self {
            encoder,
            fusion,
            decoder,
        }
    }

    /// Decodes the encoded content without fusion.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decoder.decode(&self.encoder.encode(x)?)
    }

    /// `decode(fuse(encode(x), z))` for `x: [B, 3, H, W]`, `z: [B, D]`.
    pub fn forward(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let f = self.encoder.encode(x)?;
        self.decoder.decode(&self.fusion.forward(&f, z)?)
    }

    pub fn header(&self, manifest_hash: &str, stage: u8, step: usize) -> CheckpointHeader {
        CheckpointHeader {
            variant: self.fusion.kind,
            channels: self.fusion.dims.channels,
            state_size: self.fusion.dims.state_size,
            depth: self.fusion.blocks.len(),
            embed_dim: self.fusion.dims.embed_dim,
            cond_hidden: self.fusion.dims.cond_hidden,
            manifest_hash: manifest_hash.to_string(),
            stage,
            step,
        }
    }

    pub fn model_config(header: &CheckpointHeader) -> ModelConfig {
        ModelConfig {
            variant: header.variant,
            channels: header.channels,
            state_size: header.state_size,
            depth: header.depth,
            cond_hidden: header.cond_hidden,
        }
    }

    /// Rebuilds a network from a checkpoint. Fusion parameters missing from
    /// a stage-1 checkpoint keep their fresh initialisation.
    pub fn from_checkpoint(ckpt: &Checkpoint, rng: &mut RngStream) -> Result<Self> {
        let cfg = Self::model_config(&ckpt.header);
        let mut net = Self::new(&cfg, ckpt.header.embed_dim, rng);
        ckpt.restore("encoder", &mut net.encoder)?;
        ckpt.restore("decoder", &mut net.decoder)?;
        if ckpt.has_prefix("fusion.") {
            ckpt.restore("fusion", &mut net.fusion)?;
        }
        Ok(net)
    }
}

impl Module for StyleNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&layers::join(prefix, "encoder"), f);
        self.fusion.visit(&layers::join(prefix, "fusion"), f);
        self.decoder.visit(&layers::join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&layers::join(prefix, "encoder"), f);
        self.fusion.visit_mut(&layers::join(prefix, "fusion"), f);
        self.decoder.visit_mut(&layers::join(prefix, "decoder"), f);
    }
}

/// A style indicator: a class (text path) or a reference image.
#[derive(Debug, Clone)]
pub enum StyleRef {
    /// `None` is the unstyled class.
    Text(Option<usize>),
    Image(ImageSample),
}

impl StyleRef {
    pub fn embed(&self, anchors: &AnchorTable, encoder: &JointEncoder) -> Result<Tensor> {
        match self {
            StyleRef::Text(c) => anchors.encode_text(*c),
            StyleRef::Image(img) => encoder.encode_one(&img.pixels),
        }
    }

    pub fn class_id(&self) -> Option<usize> {
        match self {
            StyleRef::Text(c) => *c,
            StyleRef::Image(img) => img.class_id,
        }
    }
}

/// Stylises one content image without recording a graph.
pub fn stylize(
    content: &ImageSample,
    style: &StyleRef,
    net: &StyleNet,
    anchors: &AnchorTable,
    encoder: &JointEncoder,
) -> Result<ImageSample> {
    if content.role != Role::Content {
        log::debug!("stylizing an image with role {:?}", content.role);
    }
    clast_tensor::no_grad(|| {
        let z = style.embed(anchors, encoder)?;
        let s = content.pixels.shape();
        if s.len() != 3 {
            return Err(ClastError::Shape(format!("content must be [3, H, W], got {s:?}")));
        }
        let x = content.pixels.reshape(&[1, s[0], s[1], s[2]])?;
        let y = net.forward(&x, &z.reshape(&[1, z.numel()])?)?;
        Ok(ImageSample {
            pixels: y.reshape(s)?,
            role: Role::Stylized,
            class_id: style.class_id(),
            content_id: content.content_id,
        })
    })
}
