//! Finite-difference gradient suite over tensor ops, layers, losses and the
//! fusion variants.
//!
//! Every case draws a fresh random instance per seed and compares backward
//! gradients with central differences at step [`H`].

use clast_tensor::gradcheck::{check_gradients, GradCheck};
use clast_tensor::{RngStream, Tensor, TensorError};
use serde::Serialize;

use crate::dataset::{style_descriptor, DescriptorConfig, JointEncoder};
use crate::error::ClastError;
use crate::losses::{
    content_loss, directional_clip_loss, perceptual_loss, style_gram_loss, supcon_loss, supcon_total, total_loss,
    unsup_contrastive_loss, LossTerms, LossWeights, ProjectionHead,
};
use crate::model::autoencoder::{Decoder, Encoder};
use crate::model::fusion::{linear_attention, self_attention, AdaLnConditioner, Fusion, FusionDims, FusionKind, QkvProj};
use crate::model::layers::{Activation, Conv, Linear, Mlp, Module};
use crate::model::ssm::{ssm_scan, Direction, SsmParams};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

type TResult<T> = clast_tensor::Result<T>;

fn lift<T>(r: crate::Result<T>) -> TResult<T> {
    r.map_err(|e| match e {
        ClastError::Tensor(t) => t,
        other => TensorError::InvalidShape {
            op: "gradcheck",
            msg: other.to_string(),
        },
    })
}

/// Random weights make the scalar reduction sensitive to every output entry;
/// the `1/sqrt(n)` scale keeps the objective O(1).
fn weighted_sum(y: &Tensor) -> TResult<Tensor> {
    let w = RngStream::new(0x5eed).normal_tensor(y.shape(), 1.0 / (y.numel() as f64).sqrt());
    Ok(y.mul(&w)?.sum_all())
}

fn params_of(m: &dyn Module) -> Vec<Tensor> {
    let mut v = Vec::new();
    m.visit("", &mut |_, t| v.push(t.detach()));
    v
}

/// Copy of `m` whose parameters are `ps`, in visiting order.
fn with_params<M: Module + Clone>(m: &M, ps: &[Tensor]) -> M {
    let mut out = m.clone();
    let mut i = 0;
    out.visit_mut("", &mut |_, t| {
        *t = ps[i].clone();
        i += 1;
    });
    out
}

/// Adds Gaussian noise to every parameter so zero-initialised heads are live.
fn perturb(m: &mut dyn Module, rng: &mut RngStream, std: f64) {
    m.visit_mut("", &mut |_, t| {
        let noise = rng.normal_vec(t.numel(), std);
        let data: Vec<f64> = t.data().iter().zip(noise).map(|(a, b)| a + b).collect();
        *t = Tensor::new(data, t.shape()).expect("same shape");
    });
}

/// `[b, 3, s, s]` pixels with grey level in `[0.3, 0.7]` and chroma in
/// `[0.1, 0.3]`; hue is undefined at zero chroma.
fn colour_pixels(r: &mut RngStream, b: usize, s: usize) -> Tensor {
    let n = s * s;
    let mut data = vec![0.0; b * 3 * n];
    for i in 0..b {
        for p in 0..n {
            let g = r.uniform_range(0.3, 0.7);
            let c = r.uniform_range(0.1, 0.3);
            let (sn, cs) = r.uniform_range(0.0, std::f64::consts::TAU).sin_cos();
            let rgb = crate::dataset::render::opponent_to_rgb(g, c * cs, c * sn);
            for (k, v) in rgb.into_iter().enumerate() {
                data[(i * 3 + k) * n + p] = v;
            }
        }
    }
    Tensor::new(data, &[b, 3, s, s]).expect("sized")
}

fn unit_rows(r: &mut RngStream, n: usize, d: usize) -> Tensor {
    r.normal_tensor(&[n, d], 1.0).l2_normalize(1, 0.0).expect("rank 2")
}

pub struct Case {
    pub name: &'static str,
    run: Box<dyn Fn(&mut RngStream, f64) -> TResult<GradCheck>>,
}

fn case(name: &'static str, run: impl Fn(&mut RngStream, f64) -> TResult<GradCheck> + 'static) -> Case {
    Case { name, run: Box::new(run) }
}

/// A case whose inputs are drawn by `make` and whose scalar is `f(inputs)`.
fn simple(
    name: &'static str,
    make: impl Fn(&mut RngStream) -> Vec<Tensor> + 'static,
    f: impl Fn(&[Tensor]) -> TResult<Tensor> + Copy + 'static,
) -> Case {
    case(name, move |r, h| check_gradients(f, &make(r), h))
}

fn normal(shape: &'static [usize]) -> impl Fn(&mut RngStream) -> Vec<Tensor> {
    move |r| vec![r.normal_tensor(shape, 1.0)]
}

fn tensor_cases() -> Vec<Case> {
    let pos = |r: &mut RngStream| vec![r.uniform_tensor(&[3, 4], 0.3, 2.0)];
    let pair = |r: &mut RngStream| vec![r.normal_tensor(&[2, 3, 4], 1.0), r.uniform_tensor(&[3, 1], 0.5, 2.0)];
    let img = |r: &mut RngStream| vec![r.normal_tensor(&[2, 3, 8, 8], 1.0), r.normal_tensor(&[4, 3, 3, 3], 0.5)];
    vec![
        simple("exp", normal(&[3, 4]), |x| weighted_sum(&x[0].exp())),
        simple("log", pos, |x| weighted_sum(&x[0].log())),
        simple("sqrt", pos, |x| weighted_sum(&x[0].sqrt())),
        simple("softplus", normal(&[3, 4]), |x| weighted_sum(&x[0].softplus())),
        simple("tanh", normal(&[3, 4]), |x| weighted_sum(&x[0].tanh())),
        simple("sigmoid", normal(&[3, 4]), |x| weighted_sum(&x[0].sigmoid())),
        simple("relu", normal(&[3, 4]), |x| weighted_sum(&x[0].relu())),
        simple("elu", normal(&[3, 4]), |x| weighted_sum(&x[0].elu())),
        simple("abs", normal(&[3, 4]), |x| weighted_sum(&x[0].abs())),
        simple("square", normal(&[3, 4]), |x| weighted_sum(&x[0].square())),
        simple("neg", normal(&[3, 4]), |x| weighted_sum(&x[0].neg())),
        simple("scale", normal(&[3, 4]), |x| weighted_sum(&x[0].scale(-1.7))),
        simple("add_scalar", normal(&[3, 4]), |x| weighted_sum(&x[0].add_scalar(0.3).square())),
        simple("add", pair, |x| weighted_sum(&x[0].add(&x[1])?)),
        simple("sub", pair, |x| weighted_sum(&x[1].sub(&x[0])?)),
        simple("mul", pair, |x| weighted_sum(&x[0].mul(&x[1])?)),
        simple("div", pair, |x| weighted_sum(&x[0].div(&x[1])?)),
        simple(
            "matmul",
            |r| vec![r.normal_tensor(&[2, 3, 4], 1.0), r.normal_tensor(&[4, 5], 1.0)],
            |x| weighted_sum(&x[0].matmul(&x[1])?),
        ),
        simple("conv2d stride 1", img, |x| weighted_sum(&x[0].conv2d(&x[1], 1, 1)?)),
        simple("conv2d stride 2", img, |x| weighted_sum(&x[0].conv2d(&x[1], 2, 1)?)),
        simple("layer_norm", normal(&[3, 6]), |x| weighted_sum(&x[0].layer_norm(1e-5)?)),
        simple("softmax", normal(&[3, 6]), |x| weighted_sum(&x[0].softmax(1)?)),
        simple("l2_normalize", normal(&[3, 6]), |x| weighted_sum(&x[0].l2_normalize(1, 1e-12)?)),
        simple("norm", normal(&[3, 6]), |x| weighted_sum(&x[0].norm(1, false)?)),
        simple(
            "cosine_similarity",
            |r| vec![r.normal_tensor(&[2, 5], 1.0), r.normal_tensor(&[2, 5], 1.0)],
            |x| weighted_sum(&x[0].cosine_similarity(&x[1], 1e-12)?),
        ),
        simple("sum", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].sum(1, false)?)),
        simple("mean", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].mean(2, true)?)),
        simple("sum_all", normal(&[2, 3]), |x| Ok(x[0].square().sum_all())),
        simple("mean_all", normal(&[2, 3]), |x| Ok(x[0].square().mean_all())),
        simple("max", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].max(0, false)?)),
        simple("reshape", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].reshape(&[6, 4])?)),
        simple("transpose", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].transpose(0, 2)?)),
        simple("permute", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].permute(&[2, 0, 1])?)),
        simple("narrow", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].narrow(2, 1, 2)?)),
        simple("flip", normal(&[2, 3, 4]), |x| weighted_sum(&x[0].flip(1)?)),
        simple("concat", normal(&[2, 3]), |x| weighted_sum(&Tensor::concat(&[x[0].clone(), x[0].square()], 1)?)),
        simple("stack", normal(&[2, 3]), |x| weighted_sum(&Tensor::stack(&[x[0].clone(), x[0].tanh()])?)),
        simple("gram", normal(&[3, 5]), |x| weighted_sum(&x[0].gram()?)),
        simple(
            "linear_recurrence",
            |r| vec![r.uniform_tensor(&[6, 3], -0.9, 0.9), r.normal_tensor(&[6, 3], 1.0)],
            |x| weighted_sum(&Tensor::linear_recurrence(&x[0], &x[1])?),
        ),
        simple(
            "selective_scan",
            |r| {
                vec![
                    r.normal_tensor(&[5, 2, 3], 1.0),
                    r.uniform_tensor(&[5, 2, 3], 0.05, 0.8),
                    r.uniform_tensor(&[3, 4], -1.5, -0.2),
                    r.normal_tensor(&[5, 2, 4], 1.0),
                    r.normal_tensor(&[5, 2, 4], 1.0),
                ]
            },
            |x| weighted_sum(&Tensor::selective_scan(&x[0], &x[1], &x[2], &x[3], &x[4])?),
        ),
        simple("avg_pool2d", normal(&[1, 2, 4, 4]), |x| weighted_sum(&x[0].avg_pool2d(2)?)),
        simple("upsample_nearest2d", normal(&[1, 2, 3, 3]), |x| weighted_sum(&x[0].upsample_nearest2d(2)?)),
    ]
}

/// Checks gradients with respect to `extra` inputs and every parameter of `m`.
fn module_case<M: Module + Clone + 'static>(
    name: &'static str,
    build: impl Fn(&mut RngStream) -> (M, Vec<Tensor>) + 'static,
    f: impl Fn(&M, &[Tensor]) -> crate::Result<Tensor> + Copy + 'static,
) -> Case {
    case(name, move |r, h| {
        let (m, extra) = build(r);
        let k = extra.len();
        let mut inputs = extra;
        inputs.extend(params_of(&m));
        let m2 = m.clone();
        check_gradients(move |x| lift(f(&with_params(&m2, &x[k..]), &x[..k])), &inputs, h)
    })
}

fn ssm_params(r: &mut RngStream, d: usize, n: usize) -> SsmParams {
    let mut p = SsmParams::new(r, d, n);
    perturb(&mut p, r, 0.2);
    p
}

fn fusion_dims() -> FusionDims {
    FusionDims {
        channels: 8,
        state_size: 2,
        embed_dim: 5,
        cond_hidden: 8,
    }
}

fn model_cases() -> Vec<Case> {
    let mut cases = vec![
        module_case(
            "linear layer",
            |r| (Linear::new(r, 4, 3, true), vec![r.normal_tensor(&[2, 4], 1.0)]),
            |m, x| Ok(weighted_sum(&m.forward(&x[0])?)?),
        ),
        module_case(
            "conv layer",
            |r| {
                let mut c = Conv::new(r, 2, 3, 2);
                perturb(&mut c, r, 0.1);
                (c, vec![r.normal_tensor(&[1, 2, 5, 5], 1.0)])
            },
            |m, x| Ok(weighted_sum(&m.forward(&x[0])?)?),
        ),
        module_case(
            "mlp tanh",
            |r| (Mlp::new(r, 3, 5, 2, Activation::Tanh), vec![r.normal_tensor(&[2, 3], 1.0)]),
            |m, x| Ok(weighted_sum(&m.forward(&x[0])?)?),
        ),
        simple(
            "encoder taps",
            |r| vec![r.uniform_tensor(&[1, 3, 8, 8], 0.0, 1.0)],
            |x| {
                let e = Encoder::new(&mut RngStream::new(3), 4);
                let f = lift(e.features(&x[0]))?;
                let mut s = Tensor::scalar(0.0);
                for t in &f.taps {
                    s = s.add(&weighted_sum(t)?)?;
                }
                Ok(s)
            },
        ),
        simple("decoder", normal(&[1, 4, 2, 2]), |x| {
            let d = Decoder::new(&mut RngStream::new(4), 4);
            weighted_sum(&lift(d.decode(&x[0]))?)
        }),
        module_case(
            "ssm scan forward",
            |r| (ssm_params(r, 3, 2), vec![r.normal_tensor(&[5, 2, 3], 1.0)]),
            |p, x| Ok(weighted_sum(&ssm_scan(&x[0], p, Direction::Forward)?)?),
        ),
        module_case(
            "ssm scan backward",
            |r| (ssm_params(r, 3, 2), vec![r.normal_tensor(&[5, 3], 1.0)]),
            |p, x| Ok(weighted_sum(&ssm_scan(&x[0], p, Direction::Backward)?)?),
        ),
        module_case(
            "self attention",
            |r| (QkvProj::new(r, 4), vec![r.normal_tensor(&[2, 5, 4], 1.0)]),
            |p, x| Ok(weighted_sum(&self_attention(&x[0], p)?)?),
        ),
        module_case(
            "linear attention",
            |r| (QkvProj::new(r, 4), vec![r.normal_tensor(&[2, 5, 4], 1.0)]),
            |p, x| Ok(weighted_sum(&linear_attention(&x[0], p)?)?),
        ),
        module_case(
            "adaln conditioner",
            |r| {
                let mut c = AdaLnConditioner::new(r, &fusion_dims());
                perturb(&mut c.mlp, r, 0.3);
                (c.mlp, vec![r.normal_tensor(&[2, 5], 1.0)])
            },
            |m, x| {
                let c = AdaLnConditioner { mlp: m.clone() };
                let o = c.forward(&x[0])?;
                let all = Tensor::concat(&[o.gamma1, o.beta1, o.gate1, o.gamma2, o.beta2, o.gate2], 2)?;
                Ok(weighted_sum(&all)?)
            },
        ),
    ];
    for kind in FusionKind::ALL {
        let name: &'static str = match kind {
            FusionKind::SsmAdaLn => "fusion ssm_adaln",
            FusionKind::AttnAdaIn => "fusion attn_adain",
            FusionKind::LinAttnAdaLn => "fusion linattn_adaln",
        };
        cases.push(module_case(
            name,
            move |r| {
                let mut f = Fusion::new(r, kind, fusion_dims(), 2);
                perturb(&mut f, r, 0.3);
                (f, vec![r.normal_tensor(&[2, 8, 3, 3], 1.0), r.normal_tensor(&[2, 5], 1.0)])
            },
            |f, x| Ok(weighted_sum(&f.forward(&x[0], &x[1])?)?),
        ));
    }
    cases
}

fn loss_cases() -> Vec<Case> {
    vec![
        simple(
            "style descriptor",
            |r| vec![colour_pixels(r, 2, 8)],
            |x| weighted_sum(&style_descriptor(&x[0], &DescriptorConfig::default())?),
        ),
        case("encode_image", |r, h| {
            let reference = r.uniform_tensor(&[6, 3, 8, 8], 0.0, 1.0);
            let enc = lift(JointEncoder::fit(DescriptorConfig::default(), 24, &reference, r))?;
            let x = colour_pixels(r, 1, 8);
            check_gradients(move |p| weighted_sum(&lift(enc.encode(&p[0]))?), &[x], h)
        }),
        case("directional loss", |r, h| {
            let zc = unit_rows(r, 3, 6);
            let tt = unit_rows(r, 3, 6);
            let tn = unit_rows(r, 1, 6).reshape(&[6])?;
            let x = r.normal_tensor(&[3, 6], 1.0);
            check_gradients(
                move |p| Ok(lift(directional_clip_loss(&p[0].l2_normalize(1, 0.0)?, &zc, &tt, &tn, 1e-9))?.loss),
                &[x],
                h,
            )
        }),
        simple(
            "supcon",
            |r| vec![r.normal_tensor(&[8, 5], 1.0)],
            |x| lift(supcon_loss(&x[0].l2_normalize(1, 0.0)?, &[0, 0, 1, 1, 2, 2, 0, 1], 0.1)),
        ),
        module_case(
            "supcon total",
            |r| {
                let head = ProjectionHead::new(r, 6, 4);
                let x = (0..3).map(|_| r.normal_tensor(&[4, 6], 1.0)).collect();
                (head, x)
            },
            |h, x| supcon_total(&x[0], &x[1], &x[2], &[0, 1, 0, 1], h, 0.1),
        ),
        simple(
            "unsup contrastive",
            |r| vec![r.normal_tensor(&[3, 5], 1.0), r.normal_tensor(&[3, 5], 1.0)],
            |x| lift(unsup_contrastive_loss(&x[0].l2_normalize(1, 0.0)?, &x[1].l2_normalize(1, 0.0)?, 0.5)),
        ),
        case("gram style loss", |r, h| {
            let style = [r.normal_tensor(&[2, 3, 4, 4], 1.0), r.normal_tensor(&[2, 4, 2, 2], 1.0)];
            let x = vec![r.normal_tensor(&[2, 3, 4, 4], 1.0), r.normal_tensor(&[2, 4, 2, 2], 1.0)];
            check_gradients(move |p| lift(style_gram_loss(p, &style)), &x, h)
        }),
        case("content loss", |r, h| {
            let target = [r.normal_tensor(&[2, 3, 4, 4], 1.0), r.normal_tensor(&[2, 4, 2, 2], 1.0)];
            let x = vec![r.normal_tensor(&[2, 3, 4, 4], 1.0), r.normal_tensor(&[2, 4, 2, 2], 1.0)];
            check_gradients(move |p| lift(content_loss(p, &target)), &x, h)
        }),
        case("perceptual loss", |r, h| {
            let target = [r.normal_tensor(&[2, 3, 4, 4], 1.0), r.normal_tensor(&[2, 4, 2, 2], 1.0)];
            let x = vec![r.normal_tensor(&[2, 3, 4, 4], 1.0), r.normal_tensor(&[2, 4, 2, 2], 1.0)];
            check_gradients(move |p| lift(perceptual_loss(p, &target)), &x, h)
        }),
        simple("total loss", normal(&[6, 2]), |x| {
            let t = |i: usize| -> TResult<Option<Tensor>> { Ok(Some(x[0].narrow(0, i, 1)?.square().sum_all())) };
            let terms = LossTerms {
                clip: t(0)?,
                supcon: t(1)?,
                sty: t(2)?,
                con: t(3)?,
                lpips: t(4)?,
                unsup: t(5)?,
            };
            let w = LossWeights {
                unsup: 0.5,
                ..LossWeights::default()
            };
            lift(total_loss(&terms, &w))
        }),
    ]
}

/// All cases, in a stable order.
pub fn cases() -> Vec<Case> {
    let mut v = tensor_cases();
    v.extend(model_cases());
    v.extend(loss_cases());
    v
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

pub fn run_case(c: &Case, instances: usize, seed: u64) -> crate::Result<CaseReport> {
    let root = RngStream::new(seed);
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut entries = 0;
    for i in 0..instances {
        let rep = (c.run)(&mut root.split(i as u64), H)?;
        worst = worst.max(rep.max_rel_err);
        worst_abs = worst_abs.max(rep.max_abs_err);
        entries += rep.entries;
    }
    Ok(CaseReport {
        name: c.name.to_string(),
        instances,
        entries,
        max_rel_err: worst,
        max_abs_err: worst_abs,
        passed: worst < TOL && worst.is_finite(),
    })
}

/// Runs every case whose name contains `filter`.
pub fn run_suite(instances: usize, filter: Option<&str>) -> crate::Result<Vec<CaseReport>> {
    cases()
        .iter()
        .enumerate()
        .filter(|(_, c)| filter.is_none_or(|f| c.name.contains(f)))
        .map(|(i, c)| run_case(c, instances, 1000 + i as u64))
        .collect()
}


/// Worst relative and absolute error of one instance of `name` at each step
/// size; separates truncation error from a wrong backward rule.
pub fn step_sweep(name: &str, seed: u64, instance: u64, hs: &[f64]) -> crate::Result<Vec<(f64, f64, f64)>> {
    let all = cases();
    let c = all
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| ClastError::Lookup(format!("no gradient case `{name}`")))?;
    let root = RngStream::new(seed);
    hs.iter()
        .map(|&h| {
            let rep = (c.run)(&mut root.split(instance), h)?;
            Ok((h, rep.max_rel_err, rep.max_abs_err))
        })
        .collect()
}

/// Worst entry per instance at the default step.
pub fn worst_entries(name: &str, seed: u64, instances: u64) -> crate::Result<Vec<(u64, f64, Option<(usize, usize, f64, f64)>)>> {
    let all = cases();
    let c = all
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| ClastError::Lookup(format!("no gradient case `{name}`")))?;
    let root = RngStream::new(seed);
    (0..instances)
        .map(|i| {
            let rep = (c.run)(&mut root.split(i), H)?;
            Ok((i, rep.max_rel_err, rep.worst))
        })
        .collect()
}
