//! Style fusion blocks.
//!
//! Every variant maps a content map `[B, d, h, w]` and a style embedding
//! `[B, D]` to a new `[B, d, h, w]`. Maps are flattened row-major into token
//! sequences `[B, L = h*w, d]`.

use std::fmt;
use std::str::FromStr;

use clast_tensor::{RngStream, Tensor, DEFAULT_LN_EPS};
use serde::{Deserialize, Serialize};

use super::layers::{join, Activation, Linear, Mlp, Module};
use super::ssm::{ssm_scan, Direction, SsmParams};
use crate::error::{ClastError, Result};

/// Query rows per block when materialising attention scores.
const ATTN_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "ssm_adaln")]
    SsmAdaLn,
    #[serde(rename = "attn_adain")]
    AttnAdaIn,
    #[serde(rename = "linattn_adaln")]
    LinAttnAdaLn,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::SsmAdaLn, FusionKind::AttnAdaIn, FusionKind::LinAttnAdaLn];

    pub fn tag(self) -> &'static str {
        match self {
            FusionKind::SsmAdaLn => "ssm_adaln",
            FusionKind::AttnAdaIn => "attn_adain",
            FusionKind::LinAttnAdaLn => "linattn_adaln",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FusionKind {
    type Err = ClastError;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| ClastError::Config(format!("unknown fusion variant `{s}` (ssm_adaln, attn_adain, linattn_adaln)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionDims {
    pub channels: usize,
    pub state_size: usize,
    pub embed_dim: usize,
    pub cond_hidden: usize,
}

/// `[B, d, h, w]` to `[B, h*w, d]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1], s[2] * s[3]])?.transpose(1, 2)?)
}

/// `[B, h*w, d]` back to `[B, d, h, w]`.
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    Ok(t.transpose(1, 2)?.reshape(&[s[0], s[2], h, w])?)
}

/// Per-block modulation vectors, each `[B, 1, d]`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub gamma1: Tensor,
    pub beta1: Tensor,
    pub gate1: Tensor,
    pub gamma2: Tensor,
    pub beta2: Tensor,
    pub gate2: Tensor,
}

/// Regresses the six adaLN vectors from a style embedding: D -> hidden
/// (tanh) -> 6d. The gate heads start at exactly zero.
#[derive(Debug, Clone)]
pub struct AdaLnConditioner {
    pub mlp: Mlp,
}

impl AdaLnConditioner {
    pub fn new(rng: &mut RngStream, dims: &FusionDims) -> Self {
        let d = dims.channels;
        let mut mlp = Mlp::new(rng, dims.embed_dim, dims.cond_hidden, 6 * d, Activation::Tanh);
        let (w, b) = (&mlp.fc2.weight, mlp.fc2.bias.as_ref().expect("bias"));
        let mut wd = w.to_vec();
        let mut bd = b.to_vec();
        let cols = 6 * d;
        for head in [2, 5] {
            for j in head * d..(head + 1) * d {
                bd[j] = 0.0;
                for r in 0..dims.cond_hidden {
                    wd[r * cols + j] = 0.0;
                }
            }
        }
        mlp.fc2.weight = Tensor::param(wd, w.shape()).expect("same shape");
        mlp.fc2.bias = Some(Tensor::param(bd, &[cols]).expect("same shape"));
        Self { mlp }
    }

    pub fn forward(&self, z: &Tensor) -> Result<Conditioning> {
        let out = self.mlp.forward(z)?;
        let b = out.shape()[0];
        let d = out.shape()[1] / 6;
        let part = |k: usize| -> Result<Tensor> { Ok(out.narrow(1, k * d, d)?.reshape(&[b, 1, d])?) };
        Ok(Conditioning {
            gamma1: part(0)?,
            beta1: part(1)?,
            gate1: part(2)?,
            gamma2: part(3)?,
            beta2: part(4)?,
            gate2: part(5)?,
        })
    }
}

fn modulate(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let x = x.layer_norm(DEFAULT_LN_EPS)?;
    Ok(x.mul(&gamma.add_scalar(1.0))?.add(beta)?)
}

#[derive(Debug, Clone)]
pub struct QkvProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl QkvProj {
    pub fn new(rng: &mut RngStream, d: usize) -> Self {
        Self {
            q: Linear::new(rng, d, d, true),
            k: Linear::new(rng, d, d, true),
            v: Linear::new(rng, d, d, true),
        }
    }
}

impl Module for QkvProj {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
    }
}

/// Row-softmax attention weights `[B, L, L]`.
pub fn attention_weights(tokens: &Tensor, p: &QkvProj) -> Result<Tensor> {
    let d = tokens.shape()[2];
    let q = p.q.forward(tokens)?;
    let k = p.k.forward(tokens)?;
    Ok(q.matmul(&k.transpose(1, 2)?)?.scale(1.0 / (d as f64).sqrt()).softmax(2)?)
}

/// Single-head scaled dot-product self-attention, `O(L^2)`. Scores are
/// built one block of query rows at a time.
pub fn self_attention(tokens: &Tensor, p: &QkvProj) -> Result<Tensor> {
    let (l, d) = (tokens.shape()[1], tokens.shape()[2]);
    let q = p.q.forward(tokens)?;
    let kt = p.k.forward(tokens)?.transpose(1, 2)?;
    let v = p.v.forward(tokens)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::with_capacity(l.div_ceil(ATTN_BLOCK));
    let mut start = 0;
    while start < l {
        let len = ATTN_BLOCK.min(l - start);
        let qb = if len == l { q.clone() } else { q.narrow(1, start, len)? };
        let w = qb.matmul(&kt)?.scale(scale).softmax(2)?;
        blocks.push(w.matmul(&v)?);
        start += len;
    }
    Ok(if blocks.len() == 1 { blocks.remove(0) } else { Tensor::concat(&blocks, 1)? })
}

/// `elu(u) + 1`.
pub fn feature_map(u: &Tensor) -> Tensor {
    u.elu().add_scalar(1.0)
}

/// Kernelised attention `phi(Q) (phi(K)^T V) / (phi(Q) . sum_j phi(K_j))`,
/// `O(L d^2)`.
pub fn linear_attention(tokens: &Tensor, p: &QkvProj) -> Result<Tensor> {
    let q = feature_map(&p.q.forward(tokens)?);
    let k = feature_map(&p.k.forward(tokens)?);
    let v = p.v.forward(tokens)?;
    let kv = k.transpose(1, 2)?.matmul(&v)?;
    let num = q.matmul(&kv)?;
    let ksum = k.sum(1, true)?.transpose(1, 2)?;
    let den = q.matmul(&ksum)?;
    Ok(num.div(&den)?)
}

/// Token mixer inside the adaLN skeleton.
#[derive(Debug, Clone)]
pub enum Mixer {
    /// Bidirectional scan; both directions share parameters.
    Ssm(SsmParams),
    LinearAttention(QkvProj),
}

impl Mixer {
    fn forward(&self, u: &Tensor) -> Result<Tensor> {
        match self {
            Mixer::Ssm(p) => {
                let seq = u.transpose(0, 1)?;
                let y = ssm_scan(&seq, p, Direction::Forward)?.add(&ssm_scan(&seq, p, Direction::Backward)?)?;
                Ok(y.transpose(0, 1)?)
            }
            Mixer::LinearAttention(p) => linear_attention(u, p),
        }
    }
}

/// adaLN-Zero residual block: modulated mixer branch, then a modulated
/// position-wise MLP branch, each behind a regressed gate.
#[derive(Debug, Clone)]
pub struct AdaLnBlock {
    pub cond: AdaLnConditioner,
    pub mixer: Mixer,
    pub mlp: Mlp,
}

impl AdaLnBlock {
    pub fn new(rng: &mut RngStream, dims: &FusionDims, ssm: bool) -> Self {
        let cond = AdaLnConditioner::new(rng, dims);
        let d = dims.channels;
        let mixer = if ssm {
            Mixer::Ssm(SsmParams::new(rng, d, dims.state_size))
        } else {
            Mixer::LinearAttention(QkvProj::new(rng, d))
        };
        let mlp = Mlp::new(rng, d, 2 * d, d, Activation::Tanh);
        Self { cond, mixer, mlp }
    }

    pub fn forward_tokens(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let c = self.cond.forward(z)?;
        let u = modulate(x, &c.gamma1, &c.beta1)?;
        let h1 = x.add(&c.gate1.mul(&self.mixer.forward(&u)?)?)?;
        let v = modulate(&h1, &c.gamma2, &c.beta2)?;
        Ok(h1.add(&c.gate2.mul(&self.mlp.forward(&v)?)?)?)
    }
}

impl Module for AdaLnBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.cond.mlp.visit(&join(prefix, "cond"), f);
        match &self.mixer {
            Mixer::Ssm(p) => p.visit(&join(prefix, "ssm"), f),
            Mixer::LinearAttention(p) => p.visit(&join(prefix, "attn"), f),
        }
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.cond.mlp.visit_mut(&join(prefix, "cond"), f);
        match &mut self.mixer {
            Mixer::Ssm(p) => p.visit_mut(&join(prefix, "ssm"), f),
            Mixer::LinearAttention(p) => p.visit_mut(&join(prefix, "attn"), f),
        }
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Self-attention followed by adaptive instance normalisation.
#[derive(Debug, Clone)]
pub struct AttnAdaInBlock {
    pub attn: QkvProj,
    /// D -> 4d (tanh) -> 2d: per-channel scale and shift.
    pub cond: Mlp,
}

impl AttnAdaInBlock {
    pub fn new(rng: &mut RngStream, dims: &FusionDims) -> Self {
        let d = dims.channels;
        Self {
            attn: QkvProj::new(rng, d),
            cond: Mlp::new(rng, dims.embed_dim, 4 * d, 2 * d, Activation::Tanh),
        }
    }

    pub fn forward_tokens(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let a = self_attention(x, &self.attn)?;
        let (b, d) = (x.shape()[0], x.shape()[2]);
        let normed = a.transpose(1, 2)?.layer_norm(DEFAULT_LN_EPS)?.transpose(1, 2)?;
        let ss = self.cond.forward(z)?;
        let gamma = ss.narrow(1, 0, d)?.reshape(&[b, 1, d])?;
        let beta = ss.narrow(1, d, d)?.reshape(&[b, 1, d])?;
        Ok(normed.mul(&gamma.add_scalar(1.0))?.add(&beta)?)
    }
}

impl Module for AttnAdaInBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.cond.visit(&join(prefix, "cond"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.cond.visit_mut(&join(prefix, "cond"), f);
    }
}

#[derive(Debug, Clone)]
pub enum FusionBlock {
    AdaLn(AdaLnBlock),
    AttnAdaIn(AttnAdaInBlock),
}

impl FusionBlock {
    pub fn new(rng: &mut RngStream, kind: FusionKind, dims: &FusionDims) -> Self {
        match kind {
            FusionKind::SsmAdaLn => FusionBlock::AdaLn(AdaLnBlock::new(rng, dims, true)),
            FusionKind::LinAttnAdaLn => FusionBlock::AdaLn(AdaLnBlock::new(rng, dims, false)),
            FusionKind::AttnAdaIn => FusionBlock::AttnAdaIn(AttnAdaInBlock::new(rng, dims)),
        }
    }

    pub fn forward_tokens(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        match self {
            FusionBlock::AdaLn(b) => b.forward_tokens(x, z),
            FusionBlock::AttnAdaIn(b) => b.forward_tokens(x, z),
        }
    }
}

impl Module for FusionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            FusionBlock::AdaLn(b) => b.visit(prefix, f),
            FusionBlock::AttnAdaIn(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            FusionBlock::AdaLn(b) => b.visit_mut(prefix, f),
            FusionBlock::AttnAdaIn(b) => b.visit_mut(prefix, f),
        }
    }
}

/// A stack of fusion blocks of one variant.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub kind: FusionKind,
    pub dims: FusionDims,
    pub blocks: Vec<FusionBlock>,
}

impl Fusion {
    pub fn new(rng: &mut RngStream, kind: FusionKind, dims: FusionDims, depth: usize) -> Self {
        let blocks = (0..depth).map(|_| FusionBlock::new(rng, kind, &dims)).collect();
        Self { kind, dims, blocks }
    }

    /// `x` is `[B, d, h, w]` (or `[d, h, w]`), `z` is `[B, D]` (or `[D]`).
    pub fn forward(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let single = x.rank() == 3;
        let x4 = if single {
            let s = x.shape();
            x.reshape(&[1, s[0], s[1], s[2]])?
        } else {
            x.clone()
        };
        let z2 = if z.rank() == 1 { z.reshape(&[1, z.numel()])? } else { z.clone() };
        let s = x4.shape().to_vec();
        if s.len() != 4 || s[1] != self.dims.channels {
            return Err(ClastError::Shape(format!(
                "fusion expects [B, {}, h, w], got {:?}",
                self.dims.channels,
                x.shape()
            )));
        }
        if z2.shape() != [s[0], self.dims.embed_dim] {
            return Err(ClastError::Shape(format!(
                "style embedding must be [{}, {}], got {:?}",
                s[0],
                self.dims.embed_dim,
                z.shape()
            )));
        }
        let mut t = to_tokens(&x4)?;
        for b in &self.blocks {
            t = b.forward_tokens(&t, &z2)?;
        }
        let y = from_tokens(&t, s[2], s[3])?;
        Ok(if single { y.reshape(x.shape())? } else { y })
    }
}

impl Module for Fusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}
