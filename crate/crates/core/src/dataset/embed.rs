//! Frozen joint-space encoders.
//!
//! Images map to `l2n(((descriptor - center) / scale) . codebook)`; the
//! codebook has orthonormal rows, so cosine similarity in the joint space is
//! cosine similarity between standardised descriptors. Text anchors are the
//! normalised class means of painting embeddings.

use clast_tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use super::descriptor::{style_descriptor, DescriptorConfig};
use crate::error::{ClastError, Result};

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEncoder {
    pub descriptor: DescriptorConfig,
    pub embed_dim: usize,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Row-major `[descriptor dim, embed_dim]`.
    pub codebook: Vec<f64>,
}

/// Gram-Schmidt on seeded Gaussian rows.
pub fn orthonormal_codebook(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if rows > cols {
        return Err(ClastError::Config(format!(
            "embedding dim {cols} must be at least the descriptor dim {rows}"
        )));
    }
    let mut m: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while m.len() < rows {
        let mut v = rng.normal_vec(cols, 1.0);
        for u in &m {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            m.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Ok(m.concat())
}

impl JointEncoder {
    /// Fits the standardisation on `[N, 3, H, W]` reference pixels.
    pub fn fit(descriptor: DescriptorConfig, embed_dim: usize, reference: &Tensor, rng: &mut RngStream) -> Result<Self> {
        let dim = descriptor.dim();
        let codebook = orthonormal_codebook(dim, embed_dim, rng)?;
        let desc = clast_tensor::no_grad(|| style_descriptor(reference, &descriptor))?;
        let n = desc.shape()[0] as f64;
        let d = desc.data();
        let mut center = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        for row in d.chunks(dim) {
            center.iter_mut().zip(row).for_each(|(c, v)| *c += v / n);
        }
        for row in d.chunks(dim) {
            for k in 0..dim {
                scale[k] += (row[k] - center[k]).powi(2) / n;
            }
        }
        let scale = scale.into_iter().map(|v| v.sqrt() + 1e-6).collect();
        Ok(Self {
            descriptor,
            embed_dim,
            center,
            scale,
            codebook,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor.dim()
    }

    /// Unit-norm embeddings `[B, D]` of `[B, 3, H, W]` pixels; differentiable.
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        let dim = self.descriptor_dim();
        let desc = style_descriptor(pixels, &self.descriptor)?;
        let center = Tensor::new(self.center.clone(), &[1, dim])?;
        let inv: Vec<f64> = self.scale.iter().map(|s| 1.0 / s).collect();
        let inv = Tensor::new(inv, &[1, dim])?;
        let code = Tensor::new(self.codebook.clone(), &[dim, self.embed_dim])?;
        let z = desc.sub(&center)?.mul(&inv)?.matmul(&code)?;
        Ok(z.l2_normalize(1, NORM_EPS)?)
    }

    /// Embedding `[D]` of a single `[3, H, W]` image.
    pub fn encode_one(&self, pixels: &Tensor) -> Result<Tensor> {
        let s = pixels.shape();
        let z = self.encode(&pixels.reshape(&[1, s[0], s[1], s[2]])?)?;
        Ok(z.reshape(&[self.embed_dim])?)
    }

    /// Encodes `[N, 3, H, W]` without a graph, in chunks of `chunk`.
    pub fn encode_detached(&self, pixels: &Tensor, chunk: usize) -> Result<Tensor> {
        clast_tensor::no_grad(|| {
            let n = pixels.shape()[0];
            let mut parts = Vec::new();
            let mut start = 0;
            while start < n {
                let len = chunk.min(n - start);
                parts.push(self.encode(&pixels.narrow(0, start, len)?)?);
                start += len;
            }
            Ok(Tensor::concat(&parts, 0)?)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTable {
    pub embed_dim: usize,
    /// One unit vector per style class.
    pub classes: Vec<Vec<f64>>,
    pub null: Vec<f64>,
}

fn normalised_mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for r in rows {
        m.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    let norm = m.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return m;
    }
    m.into_iter().map(|a| a / norm).collect()
}

impl AnchorTable {
    /// `painting_embs` is `[P, D]` with class labels; `content_embs` is `[M, D]`.
    pub fn calibrate(classes: usize, painting_embs: &Tensor, labels: &[usize], content_embs: &Tensor) -> Result<Self> {
        let dim = painting_embs.shape()[1];
        let rows: Vec<&[f64]> = painting_embs.data().chunks(dim).collect();
        let mut table = Vec::with_capacity(classes);
        for c in 0..classes {
            let members: Vec<&[f64]> = rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| *r).collect();
            if members.is_empty() {
                return Err(ClastError::Calibration(format!("class {c} has no paintings")));
            }
            table.push(normalised_mean(&members, dim));
        }
        let content: Vec<&[f64]> = content_embs.data().chunks(dim).collect();
        if content.is_empty() {
            return Err(ClastError::Calibration("no content images for the null anchor".into()));
        }
        Ok(Self {
            embed_dim: dim,
            classes: table,
            null: normalised_mean(&content, dim),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Text embedding of a class; `None` is the unstyled class.
    pub fn encode_text(&self, class: Option<usize>) -> Result<Tensor> {
        let v = match class {
            None => &self.null,
            Some(c) => self
                .classes
                .get(c)
                .ok_or_else(|| ClastError::Lookup(format!("unknown style class {c}")))?,
        };
        Ok(Tensor::new(v.clone(), &[self.embed_dim])?)
    }

    pub fn encode_name(&self, name: &str) -> Result<Tensor> {
        if name == super::StyleClass::NULL_NAME {
            return self.encode_text(None);
        }
        let id = name
            .strip_prefix("style-")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| ClastError::Lookup(format!("unknown style class `{name}`")))?;
        self.encode_text(Some(id))
    }

    /// `[C, D]` matrix of class anchors.
    pub fn matrix(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.classes.concat(), &[self.classes.len(), self.embed_dim])?)
    }
}

/// Softmax over classes of raw cosine similarities, `[N, C]`.
pub fn correlation_matrix(image_embs: &Tensor, anchors: &AnchorTable) -> Result<Tensor> {
    let a = anchors.matrix()?;
    let cos = image_embs.matmul(&a.transpose(0, 1)?)?;
    Ok(cos.softmax(1)?)
}

pub fn row_argmax(m: &Tensor) -> Vec<usize> {
    let c = m.shape()[1];
    m.data()
        .chunks(c)
        .map(|r| (0..c).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap_or(0))
        .collect()
}
