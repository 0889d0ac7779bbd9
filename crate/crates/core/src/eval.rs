//! Evaluation: embedding scores, SSIM, deception rate, correlation analysis.

use std::fmt::Write as _;
use std::path::Path;

use clast_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::{row_argmax, stack_images, style_descriptor, Dataset, DescriptorConfig, ImageSample};
use crate::error::{ClastError, Result};
use crate::model::{stylize, StyleNet, StyleRef};

/// `(s_cont, s_style)`: cosine of the output's embedding with the content's
/// embedding and with the style's text embedding.
pub fn clip_scores(content: &Tensor, stylized: &Tensor, style_text: &Tensor, ds: &Dataset) -> Result<(f64, f64)> {
    clast_tensor::no_grad(|| {
        let enc = ds.encoder();
        let ec = enc.encode_one(content)?;
        let es = enc.encode_one(stylized)?;
        let s_cont = ec.cosine_similarity(&es, 0.0)?.item();
        let s_style = style_text.cosine_similarity(&es, 0.0)?.item();
        Ok((s_cont.clamp(-1.0, 1.0), s_style.clamp(-1.0, 1.0)))
    })
}

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn grey(x: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(ClastError::Shape(format!("ssim expects [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = x.data();
    let g = (0..h * w)
        .map(|p| 0.299 * d[p] + 0.587 * d[h * w + p] + 0.114 * d[2 * h * w + p])
        .collect();
    Ok((g, h, w))
}

fn window_ssim(a: &[f64], b: &[f64], w: usize, y0: usize, x0: usize, wh: usize, ww: usize) -> f64 {
    let n = (wh * ww) as f64;
    let (mut ma, mut mb) = (0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            ma += a[y * w + x];
            mb += b[y * w + x];
        }
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            let (da, db) = (a[y * w + x] - ma, b[y * w + x] - mb);
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over 8x8 windows at stride 4 of the luminance of two
/// `[3, H, W]` images in `[0, 1]`. Images smaller than a window use one
/// global window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(ClastError::Shape(format!("ssim shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ga, h, w) = grey(a)?;
    let (gb, _, _) = grey(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Ok(window_ssim(&ga, &gb, w, 0, 0, h, w));
    }
    let (mut total, mut count) = (0.0, 0usize);
    let mut y = 0;
    while y + SSIM_WINDOW <= h {
        let mut x = 0;
        while x + SSIM_WINDOW <= w {
            total += window_ssim(&ga, &gb, w, y, x, SSIM_WINDOW, SSIM_WINDOW);
            count += 1;
            x += SSIM_STRIDE;
        }
        y += SSIM_STRIDE;
    }
    Ok(total / count as f64)
}

/// Multinomial logistic regression on standardised style descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub classes: usize,
    pub descriptor: DescriptorConfig,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Row-major `[dim, classes]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub train_accuracy: f64,
}

pub const CLASSIFIER_STEPS: usize = 2000;
pub const CLASSIFIER_LR: f64 = 0.5;

fn softmax_row(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl StyleClassifier {
    /// Full-batch gradient descent on the mean cross-entropy from zero weights.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, descriptor: DescriptorConfig, steps: usize, lr: f64) -> Result<Self> {
        if classes < 2 {
            return Err(ClastError::Eval("classifier needs at least two classes".into()));
        }
        if features.is_empty() || features.len() != labels.len() {
            return Err(ClastError::Eval("classifier needs one label per feature row".into()));
        }
        let dim = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
        }
        let mut std = vec![0.0; dim];
        for f in features {
            for k in 0..dim {
                std[k] += (f[k] - mean[k]).powi(2) / n;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| v.sqrt() + 1e-8).collect();
        let x: Vec<Vec<f64>> = features
            .iter()
            .map(|f| (0..dim).map(|k| (f[k] - mean[k]) / std[k]).collect())
            .collect();
        let mut clf = Self {
            classes,
            descriptor,
            mean,
            std,
            weight: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
            train_accuracy: 0.0,
        };
        for _ in 0..steps {
            let mut gw = vec![0.0; dim * classes];
            let mut gb = vec![0.0; classes];
            for (xi, &yi) in x.iter().zip(labels) {
                let mut p = clf.logits_std(xi);
                softmax_row(&mut p);
                p[yi] -= 1.0;
                for c in 0..classes {
                    gb[c] += p[c] / n;
                    for k in 0..dim {
                        gw[k * classes + c] += xi[k] * p[c] / n;
                    }
                }
            }
            clf.weight.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
            clf.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
        }
        let hits = features.iter().zip(labels).filter(|(f, &l)| clf.predict(f) == l).count();
        clf.train_accuracy = hits as f64 / n;
        if clf.train_accuracy < 1.0 / classes as f64 + 1e-12 {
            log::warn!("style classifier is no better than chance (accuracy {:.3})", clf.train_accuracy);
        }
        Ok(clf)
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (k, &xk) in x.iter().enumerate() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += xk * self.weight[k * self.classes + c];
            }
        }
        z
    }

    pub fn predict(&self, descriptor: &[f64]) -> usize {
        let x: Vec<f64> = descriptor.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect();
        let z = self.logits_std(&x);
        (0..self.classes).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap_or(0)
    }

    pub fn describe(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let px = Tensor::stack(&images.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
        let d = clast_tensor::no_grad(|| style_descriptor(&px, &self.descriptor))?;
        let dim = d.shape()[1];
        Ok(d.data().chunks(dim).map(<[f64]>::to_vec).collect())
    }
}

/// Classifier on the dataset's real paintings.
pub fn train_deception_classifier(ds: &Dataset) -> Result<StyleClassifier> {
    let images: Vec<&Tensor> = ds.paintings.iter().map(|p| &p.pixels).collect();
    let desc = ds.encoder().descriptor;
    let px = stack_images(&ds.paintings)?;
    let d = clast_tensor::no_grad(|| style_descriptor(&px, &desc))?;
    let dim = d.shape()[1];
    let feats: Vec<Vec<f64>> = d.data().chunks(dim).map(<[f64]>::to_vec).collect();
    debug_assert_eq!(images.len(), feats.len());
    StyleClassifier::fit(&feats, &ds.painting_labels(), ds.num_classes(), desc, CLASSIFIER_STEPS, CLASSIFIER_LR)
}

pub const CLASSIFIER_FILE: &str = "classifier.json";

impl StyleClassifier {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| ClastError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClastError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads `classifier.json` next to the manifest, training and writing it if absent.
pub fn dataset_classifier(ds: &Dataset, dataset_dir: &Path) -> Result<StyleClassifier> {
    let path = dataset_dir.join(CLASSIFIER_FILE);
    if path.exists() {
        return StyleClassifier::load(&path);
    }
    let clf = train_deception_classifier(ds)?;
    clf.save(&path)?;
    Ok(clf)
}

/// Fraction of images the classifier assigns to their target class.
pub fn deception_rate(stylized: &[(&Tensor, usize)], clf: &StyleClassifier) -> Result<f64> {
    if stylized.is_empty() {
        return Err(ClastError::Eval("deception rate of an empty set".into()));
    }
    let images: Vec<&Tensor> = stylized.iter().map(|(t, _)| *t).collect();
    let feats = clf.describe(&images)?;
    let hits = feats.iter().zip(stylized).filter(|(f, (_, c))| clf.predict(f) == *c).count();
    Ok(hits as f64 / stylized.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub content_id: usize,
    pub class_id: usize,
    /// `text` or `image`.
    pub guide: String,
    pub s_cont: f64,
    pub s_style: f64,
    pub ssim: f64,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_s_cont: f64,
    pub mean_s_style: f64,
    pub mean_ssim: f64,
    pub deception_rate: f64,
    /// Mean SSIM of the stage-1 autoencoder on held-out contents.
    pub reconstruction_ssim: f64,
    pub classifier_accuracy: f64,
    pub correlation: Vec<Vec<f64>>,
    pub correlation_accuracy: f64,
    pub config_hash: String,
    pub manifest_hash: String,
}

impl EvalReport {
    /// Finite scores, ranges, and unit row sums of the correlation matrix.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: &str| Err(ClastError::Eval(m.to_string()));
        for s in &self.images {
            for v in [s.s_cont, s.s_style, s.ssim] {
                if !v.is_finite() {
                    return bad("non-finite per-image score");
                }
            }
            if !(-1.0..=1.0).contains(&s.s_cont) || !(-1.0..=1.0).contains(&s.s_style) {
                return bad("embedding score outside [-1, 1]");
            }
        }
        for v in [self.mean_s_cont, self.mean_s_style, self.mean_ssim, self.deception_rate, self.reconstruction_ssim] {
            if !v.is_finite() {
                return bad("non-finite aggregate score");
            }
        }
        if !(0.0..=1.0).contains(&self.deception_rate) {
            return bad("deception rate outside [0, 1]");
        }
        for row in &self.correlation {
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("correlation row does not sum to 1");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn correlation_csv(m: &Tensor, labels: &[usize]) -> String {
    let c = m.shape()[1];
    let mut s = String::from("painting,true_class,argmax");
    for j in 0..c {
        let _ = write!(s, ",style-{j}");
    }
    s.push('\n');
    for (i, (row, am)) in m.data().chunks(c).zip(row_argmax(m)).enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{i},{},{am},{}", labels[i], cells.join(","));
    }
    s
}

/// Stylised outputs of the evaluation protocol: each held-out content
/// (first `eval_contents`) under every class, guided by text and by a
/// painting of that class.
pub struct EvalOutputs {
    pub entries: Vec<(ImageSample, ImageSample, &'static str)>,
}

pub fn stylize_eval_set(ds: &Dataset, net: &StyleNet, eval_contents: usize) -> Result<EvalOutputs> {
    let ids: Vec<usize> = ds.holdout_content_ids().into_iter().take(eval_contents.max(1)).collect();
    let mut entries = Vec::new();
    for &cid in &ids {
        let content = &ds.contents[cid];
        for c in 0..ds.num_classes() {
            let t = stylize(content, &StyleRef::Text(Some(c)), net, ds.anchors(), ds.encoder())?;
            entries.push((content.clone(), t, "text"));
            let of = ds.paintings_of(c);
            let painting = ds.paintings[of[cid % of.len()]].clone();
            let i = stylize(content, &StyleRef::Image(painting), net, ds.anchors(), ds.encoder())?;
            entries.push((content.clone(), i, "image"));
        }
    }
    Ok(EvalOutputs { entries })
}

pub fn reconstruction_ssim(ds: &Dataset, net: &StyleNet) -> Result<f64> {
    let ids = ds.holdout_content_ids();
    let x = ds.content_batch(&ids)?;
    let y = clast_tensor::no_grad(|| net.reconstruct(&x))?;
    let mut total = 0.0;
    for i in 0..ids.len() {
        let a = x.narrow(0, i, 1)?.reshape(&x.shape()[1..])?;
        let b = y.narrow(0, i, 1)?.reshape(&x.shape()[1..])?;
        total += ssim(&a, &b)?;
    }
    Ok(total / ids.len() as f64)
}

/// Scores the stage-2 network `net`; reconstruction SSIM is measured on the
/// stage-1 autoencoder `stage1`.
pub fn evaluate(
    ds: &Dataset,
    net: &StyleNet,
    stage1: &StyleNet,
    clf: &StyleClassifier,
    eval_contents: usize,
    config_hash: &str,
) -> Result<(EvalReport, EvalOutputs, Tensor)> {
    let outputs = stylize_eval_set(ds, net, eval_contents)?;
    let mut images = Vec::with_capacity(outputs.entries.len());
    let targets: Vec<(&Tensor, usize)> = outputs
        .entries
        .iter()
        .map(|(_, s, _)| (&s.pixels, s.class_id.expect("styled")))
        .collect();
    let feats = clf.describe(&targets.iter().map(|(t, _)| *t).collect::<Vec<_>>())?;
    for ((content, styled, guide), f) in outputs.entries.iter().zip(&feats) {
        let class = styled.class_id.expect("styled");
        let text = ds.anchors().encode_text(Some(class))?;
        let (s_cont, s_style) = clip_scores(&content.pixels, &styled.pixels, &text, ds)?;
        images.push(ImageScore {
            content_id: content.content_id,
            class_id: class,
            guide: guide.to_string(),
            s_cont,
            s_style,
            ssim: ssim(&content.pixels, &styled.pixels)?,
            predicted_class: clf.predict(f),
        });
    }
    let text_only: Vec<&ImageScore> = images.iter().filter(|s| s.guide == "text").collect();
    let mean = |f: &dyn Fn(&ImageScore) -> f64| text_only.iter().map(|s| f(s)).sum::<f64>() / text_only.len() as f64;
    let text_targets: Vec<(&Tensor, usize)> = outputs
        .entries
        .iter()
        .filter(|e| e.2 == "text")
        .map(|(_, s, _)| (&s.pixels, s.class_id.expect("styled")))
        .collect();
    let (corr, corr_acc) = ds.correlation()?;
    let c = corr.shape()[1];
    let report = EvalReport {
        mean_s_cont: mean(&|s| s.s_cont),
        mean_s_style: mean(&|s| s.s_style),
        mean_ssim: mean(&|s| s.ssim),
        deception_rate: deception_rate(&text_targets, clf)?,
        reconstruction_ssim: reconstruction_ssim(ds, stage1)?,
        classifier_accuracy: clf.train_accuracy,
        correlation: corr.data().chunks(c).map(<[f64]>::to_vec).collect(),
        correlation_accuracy: corr_acc,
        config_hash: config_hash.to_string(),
        manifest_hash: ds.hash().to_string(),
        images,
    };
    report.check_invariants()?;
    Ok((report, outputs, corr))
}
