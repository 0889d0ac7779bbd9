//! Training objectives.

use std::collections::HashMap;
use std::fmt::Write as _;

use clast_tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ClastError, Result};
use crate::model::layers::{join, Linear, Module};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip: f64,
    pub supcon: f64,
    pub sty: f64,
    pub con: f64,
    pub lpips: f64,
    /// Pairwise NT-Xent between text- and image-guided outputs; off by default.
    pub unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip: 1.0,
            supcon: 2.0,
            sty: 50.0,
            con: 0.02,
            lpips: 1.0,
            unsup: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            clip: 0.0,
            supcon: 0.0,
            sty: 0.0,
            con: 0.0,
            lpips: 0.0,
            unsup: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::zero()
    }
}

/// Result of the directional loss with the count of rows whose image
/// direction vanished.
#[derive(Debug, Clone)]
pub struct Directional {
    pub loss: Tensor,
    pub degenerate: usize,
}

/// Mean over rows of `1 - cos(z_out - z_content, t_target - t_null)`.
///
/// Inputs are `[B, D]`; `t_null` may be `[D]`. A row whose image direction
/// has norm below `eps` contributes exactly 1.
pub fn directional_clip_loss(z_out: &Tensor, z_content: &Tensor, t_target: &Tensor, t_null: &Tensor, eps: f64) -> Result<Directional> {
    let to2 = |t: &Tensor| -> Result<Tensor> {
        Ok(if t.rank() == 1 { t.reshape(&[1, t.numel()])? } else { t.clone() })
    };
    let di = to2(z_out)?.sub(&to2(z_content)?)?;
    let dt = to2(t_target)?.sub(&to2(t_null)?)?;
    let rows = di.shape()[0];
    let nt = dt.norm(1, false)?;
    if nt.data().iter().any(|&v| v < eps) {
        return Err(ClastError::Config("target equals null style".into()));
    }
    let ni = di.norm(1, false)?;
    let mask: Vec<f64> = ni.data().iter().map(|&v| if v < eps { 0.0 } else { 1.0 }).collect();
    let degenerate = mask.iter().filter(|&&m| m == 0.0).count();
    if degenerate > 0 {
        log::debug!("directional loss: {degenerate} rows with no image change");
    }
    let pad: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let dot = di.mul(&dt)?.sum(1, false)?;
    let denom = ni.add(&Tensor::from_slice(&pad))?.mul(&nt)?;
    let cos = dot.mul(&Tensor::from_slice(&mask))?.div(&denom)?;
    let loss = cos.neg().add_scalar(1.0).sum_all().scale(1.0 / rows as f64);
    Ok(Directional { loss, degenerate })
}

/// Trainable `D -> P` map followed by L2 normalisation.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn new(rng: &mut RngStream, inp: usize, out: usize) -> Self {
        Self {
            linear: Linear::new(rng, inp, out, true),
        }
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.linear.forward(z)?.l2_normalize(1, 1e-12)?)
    }
}

impl Module for ProjectionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// `log softmax` over each row of `logits [N, N]` with the diagonal excluded.
/// Diagonal entries of the result are meaningless and must be masked out.
fn off_diagonal_log_softmax(logits: &Tensor) -> Result<Tensor> {
    let n = logits.shape()[0];
    let d = logits.data();
    let mut shift = vec![0.0; n];
    let mut off = vec![1.0; n * n];
    for i in 0..n {
        off[i * n + i] = 0.0;
        shift[i] = (0..n).filter(|&k| k != i).map(|k| d[i * n + k]).fold(f64::NEG_INFINITY, f64::max);
        if !shift[i].is_finite() {
            shift[i] = 0.0;
        }
    }
    let shift = Tensor::new(shift, &[n, 1])?;
    let off = Tensor::new(off, &[n, n])?;
    let shifted = logits.sub(&shift)?;
    let lse = shifted.exp().mul(&off)?.sum(1, true)?.log();
    Ok(shifted.sub(&lse)?)
}

/// Supervised contrastive loss over unit vectors `z [N, P]`:
/// `-sum_i 1/|P(i)| sum_{j in P(i)} log(exp(z_i.z_j/t) / sum_{k != i} exp(z_i.z_k/t))`
/// where `P(i)` holds the other samples sharing `i`'s label. Samples without
/// a positive contribute zero.
pub fn supcon_loss(z: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
    let n = z.shape()[0];
    if labels.len() != n || n < 2 {
        return Err(ClastError::Shape(format!("supcon needs >= 2 samples with one label each, got {n} and {}", labels.len())));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let positives = counts[&labels[i]] - 1;
        if positives == 0 {
            log::warn!("supcon: sample {i} (label {}) has no positive; contributes 0", labels[i]);
            continue;
        }
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                weights[i * n + j] = 1.0 / positives as f64;
            }
        }
    }
    let logits = z.matmul(&z.transpose(0, 1)?)?.scale(1.0 / tau);
    let logp = off_diagonal_log_softmax(&logits)?;
    Ok(logp.mul(&Tensor::new(weights, &[n, n])?)?.sum_all().neg())
}

/// Sum of supcon over the three pairings of (image-guided, text-guided,
/// style) embeddings, each pairing projected through the shared head.
pub fn supcon_total(img_guided: &Tensor, txt_guided: &Tensor, style: &Tensor, labels: &[usize], head: &ProjectionHead, tau: f64) -> Result<Tensor> {
    let n = labels.len();
    for t in [img_guided, txt_guided, style] {
        if t.shape()[0] != n {
            return Err(ClastError::Shape(format!("supcon_total: {} embeddings for {n} labels", t.shape()[0])));
        }
    }
    let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let pair = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let z = head.forward(&Tensor::concat(&[a.clone(), b.clone()], 0)?)?;
        supcon_loss(&z, &doubled, tau)
    };
    let l1 = pair(img_guided, txt_guided)?;
    let l2 = pair(style, txt_guided)?;
    let l3 = pair(style, img_guided)?;
    Ok(l1.add(&l2)?.add(&l3)?)
}

/// NT-Xent over `m` pairs: each of the `2m` samples has its partner as the
/// only positive and every other sample as a negative. Summed over samples.
pub fn unsup_contrastive_loss(za: &Tensor, zb: &Tensor, tau: f64) -> Result<Tensor> {
    let m = za.shape()[0];
    if zb.shape() != za.shape() {
        return Err(ClastError::Shape(format!("pair shapes differ: {:?} vs {:?}", za.shape(), zb.shape())));
    }
    if m < 2 {
        log::warn!("unsup contrastive loss: a single pair has no negatives; returning 0");
        return Ok(za.sum_all().scale(0.0));
    }
    let z = Tensor::concat(&[za.clone(), zb.clone()], 0)?;
    let n = 2 * m;
    let sim = z.matmul(&z.transpose(0, 1)?)?.scale(1.0 / tau);
    let mut pos = vec![0.0; n * n];
    for i in 0..m {
        pos[i * n + i + m] = 1.0;
        pos[(i + m) * n + i] = 1.0;
    }
    let mut not_self = vec![1.0; n * n];
    for i in 0..n {
        not_self[i * n + i] = 0.0;
    }
    // log sum_{k != i} exp(s_ik), stabilised by the largest possible logit.
    let c = 1.0 / tau;
    let lse = sim.add_scalar(-c).exp().mul(&Tensor::new(not_self, &[n, n])?)?.sum(1, false)?.log().add_scalar(c);
    let positive = sim.mul(&Tensor::new(pos, &[n, n])?)?.sum(1, false)?;
    Ok(lse.sub(&positive)?.sum_all())
}

fn check_taps(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        let sa: Vec<&[usize]> = a.iter().map(|t| t.shape()).collect();
        let sb: Vec<&[usize]> = b.iter().map(|t| t.shape()).collect();
        return Err(ClastError::Shape(format!("tap shapes differ: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Gram matrices `[B, C, C]` of `[B, C, H, W]` maps, divided by `C*H*W`.
pub fn normalized_gram(f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = f.reshape(&[b, c, hw])?;
    Ok(flat.matmul(&flat.transpose(1, 2)?)?.scale(1.0 / (c * hw) as f64))
}

/// `sum_taps |G(out) - G(style)|_1`, averaged over the batch.
pub fn style_gram_loss(out: &[Tensor], style: &[Tensor]) -> Result<Tensor> {
    check_taps(out, style)?;
    let mut total = Tensor::scalar(0.0);
    for (a, b) in out.iter().zip(style) {
        let batch = a.shape()[0] as f64;
        let d = normalized_gram(a)?.sub(&normalized_gram(b)?)?.abs().sum_all();
        total = total.add(&d.scale(1.0 / batch))?;
    }
    Ok(total)
}

/// `sum_taps mean |out - content|`.
pub fn content_loss(out: &[Tensor], content: &[Tensor]) -> Result<Tensor> {
    check_taps(out, content)?;
    let mut total = Tensor::scalar(0.0);
    for (a, b) in out.iter().zip(content) {
        total = total.add(&a.sub(b)?.abs().mean_all())?;
    }
    Ok(total)
}

/// Feature distance: per tap, channel vectors are L2-normalised, then the
/// squared distance is averaged over batch and positions; taps are summed.
pub fn perceptual_loss(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    check_taps(a, b)?;
    let mut total = Tensor::scalar(0.0);
    for (x, y) in a.iter().zip(b) {
        let s = x.shape();
        let count = (s[0] * s[2] * s[3]) as f64;
        let nx = x.l2_normalize(1, 1e-10)?;
        let ny = y.l2_normalize(1, 1e-10)?;
        let d = nx.sub(&ny)?.square().sum_all().scale(1.0 / count);
        total = total.add(&d)?;
    }
    Ok(total)
}

/// Component losses of one step; absent terms count as zero.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub clip: Option<Tensor>,
    pub supcon: Option<Tensor>,
    pub sty: Option<Tensor>,
    pub con: Option<Tensor>,
    pub lpips: Option<Tensor>,
    pub unsup: Option<Tensor>,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, &Option<Tensor>); 6] {
        [
            ("L_clip", &self.clip),
            ("L_supcon", &self.supcon),
            ("L_sty", &self.sty),
            ("L_con", &self.con),
            ("L_lpips", &self.lpips),
            ("L_unsup", &self.unsup),
        ]
    }

    pub fn value(t: &Option<Tensor>) -> f64 {
        t.as_ref().map_or(0.0, Tensor::item)
    }
}

/// Weighted sum of the terms. A non-finite term is an error naming it.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<Tensor> {
    let weights = [w.clip, w.supcon, w.sty, w.con, w.lpips, w.unsup];
    let mut total = Tensor::scalar(0.0);
    for ((name, term), weight) in terms.named().into_iter().zip(weights) {
        if let Some(t) = term {
            let v = t.item();
            if !v.is_finite() {
                return Err(ClastError::NonFiniteLoss { term: name, value: v });
            }
            total = total.add(&t.scale(weight))?;
        }
    }
    Ok(total)
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub clip: f64,
    pub supcon: f64,
    pub sty: f64,
    pub con: f64,
    pub lpips: f64,
    pub total: f64,
    pub unsup: f64,
}

impl LossRecord {
    pub fn new(step: usize, terms: &LossTerms, total: f64) -> Self {
        Self {
            step,
            clip: LossTerms::value(&terms.clip),
            supcon: LossTerms::value(&terms.supcon),
            sty: LossTerms::value(&terms.sty),
            con: LossTerms::value(&terms.con),
            lpips: LossTerms::value(&terms.lpips),
            total,
            unsup: LossTerms::value(&terms.unsup),
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "step,L_clip,L_supcon,L_sty,L_con,L_lpips,total,L_unsup";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.clip, r.supcon, r.sty, r.con, r.lpips, r.total, r.unsup
        );
    }
    s
}
