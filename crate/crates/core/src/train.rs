//! Two-stage training: reconstruction, then style conditioning.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clast_tensor::{RngStream, Tensor};

use crate::config::{AdamConfig, Config};
use crate::dataset::Dataset;
use crate::error::{ClastError, Result};
use crate::losses::{
    content_loss, directional_clip_loss, perceptual_loss, style_gram_loss, supcon_total, total_loss, unsup_contrastive_loss, LossRecord,
    LossTerms, ProjectionHead,
};
use crate::model::{set_trainable, Checkpoint, Encoder, Module, StyleNet};

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Updates every parameter that requires gradients and received one;
    /// updated tensors are fresh leaves with empty gradients.
    pub fn step(&mut self, modules: &mut [(&str, &mut dyn Module)]) {
        self.step += 1;
        let c = self.cfg.clone();
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (prefix, m) in modules.iter_mut() {
            m.visit_mut(prefix, &mut |name, t| {
                if !t.requires_grad() {
                    return;
                }
                let Some(g) = t.grad() else { return };
                let (m1, m2) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let mut data = t.to_vec();
                for i in 0..g.len() {
                    m1[i] = c.beta1 * m1[i] + (1.0 - c.beta1) * g[i];
                    m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let mh = m1[i] / bc1;
                    let vh = m2[i] / bc2;
                    data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                }
                *t = Tensor::param(data, t.shape()).expect("same shape");
            });
        }
    }
}

/// Random indices, without replacement while the pool lasts.
fn sample(rng: &mut RngStream, pool: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut p = pool.to_vec();
        rng.shuffle(&mut p);
        out.extend(p.into_iter().take(n - out.len()));
    }
    out
}

fn save_periodic(dir: Option<&Path>, every: usize, step: usize, ckpt: impl FnOnce() -> Checkpoint, stage: u8) -> Result<()> {
    if let Some(dir) = dir {
        if every > 0 && step.is_multiple_of(every) {
            ckpt().save(&dir.join(format!("stage{stage}_step{step}.json")))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Record {
    pub step: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
}

pub fn stage1_csv(records: &[Stage1Record]) -> String {
    let mut s = String::from("step,L_l1,L_perceptual,total\n");
    for r in records {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", r.step, r.l1, r.perceptual, r.total);
    }
    s
}

pub struct Stage1Outcome {
    pub net: StyleNet,
    pub checkpoint: Checkpoint,
    pub log: Vec<Stage1Record>,
}

/// Frozen copy of an encoder used as a fixed feature extractor.
pub fn frozen(encoder: &Encoder) -> Encoder {
    let mut e = encoder.clone();
    set_trainable(&mut e, false);
    e
}

pub fn initial_net(cfg: &Config, ds: &Dataset) -> StyleNet {
    StyleNet::new(&cfg.model, ds.config().embed_dim, &mut RngStream::new(cfg.train.seed).split(0))
}

/// Trains encoder and decoder to reconstruct content images under an L1
/// plus feature-distance loss. The feature extractor is a frozen copy of
/// the encoder at initialisation.
pub fn train_stage1(cfg: &Config, ds: &Dataset, ckpt_dir: Option<&Path>) -> Result<Stage1Outcome> {
    let t = &cfg.train;
    let mut net = initial_net(cfg, ds);
    let perceptual = frozen(&net.encoder);
    let mut rng = RngStream::new(t.seed).split(1);
    let mut adam = Adam::new(t.adam(t.stage1_lr));
    let pool = ds.train_content_ids();
    let hash = ds.hash().to_string();
    let capture = |net: &StyleNet, step: usize| {
        Checkpoint::capture(net.header(&hash, 1, step), &[("encoder", &net.encoder), ("decoder", &net.decoder)])
    };
    let mut log = Vec::with_capacity(t.stage1_iterations);
    let mut last_good = net.clone();
    for step in 1..=t.stage1_iterations {
        let ids = sample(&mut rng, &pool, t.stage1_batch);
        let x = ds.content_batch(&ids)?;
        let y = net.reconstruct(&x)?;
        let l1 = y.sub(&x)?.abs().mean_all();
        let lp = perceptual_loss(&perceptual.features(&y)?.taps, &perceptual.features(&x)?.taps)?;
        let loss = l1.add(&lp.scale(t.stage1_perceptual))?;
        let total = loss.item();
        if !total.is_finite() {
            return Err(ClastError::Diverged {
                step,
                last_good: Box::new(capture(&last_good, step - 1)),
            });
        }
        log.push(Stage1Record {
            step,
            l1: l1.item(),
            perceptual: lp.item(),
            total,
        });
        last_good = net.clone();
        loss.backward()?;
        adam.step(&mut [("encoder", &mut net.encoder), ("decoder", &mut net.decoder)]);
        save_periodic(ckpt_dir, t.checkpoint_every, step, || capture(&net, step), 1)?;
        if step % 100 == 0 {
            log::info!("stage 1 step {step}: loss {total:.5}");
        }
    }
    let checkpoint = capture(&net, t.stage1_iterations);
    Ok(Stage1Outcome { net, checkpoint, log })
}

/// Labels for one batch: `k` distinct classes assigned round-robin, so with
/// `batch >= 4` every class present appears at least twice.
pub fn batch_labels(rng: &mut RngStream, classes: usize, batch: usize) -> Vec<usize> {
    let k = (batch / 2).clamp(1, classes);
    let mut all: Vec<usize> = (0..classes).collect();
    rng.shuffle(&mut all);
    (0..batch).map(|i| all[i % k]).collect()
}

pub struct Stage2Outcome {
    pub net: StyleNet,
    pub head: ProjectionHead,
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

/// Everything one stage-2 step computes, exposed for tests.
pub struct StepLosses {
    pub terms: LossTerms,
    pub total: Tensor,
    pub text_guided: Tensor,
    pub image_guided: Tensor,
}

/// Builds the loss graph for one batch.
pub fn stage2_losses(
    cfg: &Config,
    ds: &Dataset,
    net: &StyleNet,
    head: &ProjectionHead,
    content_ids: &[usize],
    labels: &[usize],
    painting_ids: &[usize],
) -> Result<StepLosses> {
    let w = cfg.train.weights;
    let enc = ds.encoder();
    let anchors = ds.anchors();
    let x = ds.content_batch(content_ids)?;
    let style = ds.painting_batch(painting_ids)?;
    let b = labels.len();
    let z_text = Tensor::stack(&labels.iter().map(|&c| anchors.encode_text(Some(c))).collect::<Result<Vec<_>>>()?)?;
    let (z_style, z_content) = clast_tensor::no_grad(|| -> Result<(Tensor, Tensor)> { Ok((enc.encode(&style)?, enc.encode(&x)?)) })?;

    let text_guided = net.forward(&x, &z_text)?;
    let image_guided = net.forward(&x, &z_style)?;
    let mut terms = LossTerms::default();
    let need_embed = w.clip != 0.0 || w.supcon != 0.0 || w.unsup != 0.0;
    let (e_t, e_i) = if need_embed {
        (Some(enc.encode(&text_guided)?), Some(enc.encode(&image_guided)?))
    } else {
        (None, None)
    };
    if w.clip != 0.0 {
        let null = anchors.encode_text(None)?;
        let lt = directional_clip_loss(e_t.as_ref().expect("embedded"), &z_content, &z_text, &null, 1e-9)?;
        let li = directional_clip_loss(e_i.as_ref().expect("embedded"), &z_content, &z_text, &null, 1e-9)?;
        terms.clip = Some(lt.loss.add(&li.loss)?.scale(0.5));
    }
    if w.supcon != 0.0 {
        let l = supcon_total(e_i.as_ref().expect("embedded"), e_t.as_ref().expect("embedded"), &z_style, labels, head, cfg.train.temperature)?;
        terms.supcon = Some(l);
    }
    if w.unsup != 0.0 {
        let za = head.forward(e_i.as_ref().expect("embedded"))?;
        let zb = head.forward(e_t.as_ref().expect("embedded"))?;
        terms.unsup = Some(unsup_contrastive_loss(&za, &zb, cfg.train.temperature)?);
    }
    if w.sty != 0.0 || w.con != 0.0 || w.lpips != 0.0 {
        let fx = net.encoder.features(&x)?;
        let fi = net.encoder.features(&image_guided)?;
        let ft = net.encoder.features(&text_guided)?;
        if w.sty != 0.0 {
            let fs = net.encoder.features(&style)?;
            terms.sty = Some(style_gram_loss(&fi.taps, &fs.taps)?);
        }
        if w.con != 0.0 {
            let l = content_loss(fi.content_taps(), fx.content_taps())?.add(&content_loss(ft.content_taps(), fx.content_taps())?)?;
            terms.con = Some(l);
        }
        if w.lpips != 0.0 {
            let l = perceptual_loss(&fi.taps, &fx.taps)?.add(&perceptual_loss(&ft.taps, &fx.taps)?)?;
            terms.lpips = Some(l);
        }
    }
    debug_assert_eq!(b, content_ids.len());
    let total = total_loss(&terms, &w)?;
    Ok(StepLosses {
        terms,
        total,
        text_guided,
        image_guided,
    })
}

pub fn stage2_checkpoint(net: &StyleNet, head: &ProjectionHead, hash: &str, step: usize) -> Checkpoint {
    Checkpoint::capture(
        net.header(hash, 2, step),
        &[("encoder", &net.encoder), ("fusion", &net.fusion), ("decoder", &net.decoder), ("head", head)],
    )
}

/// Conditions the decoder and fusion stack on style embeddings with the
/// encoder frozen. The projection head is trained jointly.
pub fn train_stage2(cfg: &Config, ds: &Dataset, stage1: &Checkpoint, ckpt_dir: Option<&Path>) -> Result<Stage2Outcome> {
    let t = &cfg.train;
    let root = RngStream::new(t.seed);
    let mut net = StyleNet::new(&cfg.model, ds.config().embed_dim, &mut root.split(0));
    stage1.restore("encoder", &mut net.encoder)?;
    stage1.restore("decoder", &mut net.decoder)?;
    set_trainable(&mut net.encoder, false);
    let mut head = ProjectionHead::new(&mut root.split(3), ds.config().embed_dim, t.projection_dim);
    let mut rng = root.split(2);
    let mut adam = Adam::new(t.adam(t.stage2_lr));
    let pool = ds.train_content_ids();
    let hash = ds.hash().to_string();
    let mut log = Vec::with_capacity(t.stage2_iterations);
    let mut last_good = (net.clone(), head.clone());
    for step in 1..=t.stage2_iterations {
        let labels = batch_labels(&mut rng, ds.num_classes(), t.stage2_batch);
        let content_ids = sample(&mut rng, &pool, labels.len());
        let painting_ids: Vec<usize> = labels
            .iter()
            .map(|&c| {
                let of = ds.paintings_of(c);
                of[rng.below(of.len())]
            })
            .collect();
        let out = match stage2_losses(cfg, ds, &net, &head, &content_ids, &labels, &painting_ids) {
            Err(ClastError::NonFiniteLoss { term, value }) => {
                log::error!("stage 2 step {step}: {term} = {value}");
                return Err(ClastError::Diverged {
                    step,
                    last_good: Box::new(stage2_checkpoint(&last_good.0, &last_good.1, &hash, step - 1)),
                });
            }
            other => other?,
        };
        let total = out.total.item();
        if !total.is_finite() {
            return Err(ClastError::Diverged {
                step,
                last_good: Box::new(stage2_checkpoint(&last_good.0, &last_good.1, &hash, step - 1)),
            });
        }
        log.push(LossRecord::new(step, &out.terms, total));
        last_good = (net.clone(), head.clone());
        if out.total.requires_grad() {
            out.total.backward()?;
        }
        adam.step(&mut [("fusion", &mut net.fusion), ("decoder", &mut net.decoder), ("head", &mut head)]);
        save_periodic(ckpt_dir, t.checkpoint_every, step, || stage2_checkpoint(&net, &head, &hash, step), 2)?;
        if step % 50 == 0 {
            log::info!("stage 2 step {step}: loss {total:.5}");
        }
    }
    let checkpoint = stage2_checkpoint(&net, &head, &hash, t.stage2_iterations);
    Ok(Stage2Outcome { net, head, checkpoint, log })
}

/// Stage-2 network and head from a checkpoint.
pub fn load_stage2(ckpt: &Checkpoint, projection_dim: usize) -> Result<(StyleNet, ProjectionHead)> {
    let net = StyleNet::from_checkpoint(ckpt, &mut RngStream::new(0))?;
    let mut head = ProjectionHead::new(&mut RngStream::new(0), ckpt.header.embed_dim, projection_dim);
    if ckpt.has_prefix("head.") {
        ckpt.restore("head", &mut head)?;
    }
    Ok((net, head))
}

pub fn checkpoint_path(run_dir: &Path, stage: u8) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage{stage}.json"))
}
