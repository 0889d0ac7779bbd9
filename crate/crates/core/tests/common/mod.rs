//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use clast::losses::supcon_loss;
use clast::model::fusion::{Fusion, FusionDims, FusionKind};
use clast::model::ssm::{ssm_scan, Direction, SsmParams};
use clast_tensor::{RngStream, Tensor};

pub const SCAN_TOL: f64 = 1e-10;
pub const SUPCON_TOL: f64 = 1e-10;
pub const PERMUTATION_TOL: f64 = 1e-12;
/// Four labels appearing twice each, all embeddings identical, any
/// temperature: every sample has one positive and seven equal logits, so the
/// loss is `8 ln 7`. Value taken from the brute-force double sum.
pub const SUPCON_IDENTICAL_8: f64 = 15.567281192442506;

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

/// Step-by-step recurrence over `x [L, d]` straight from the parameter values.
pub fn naive_scan(x: &[f64], l: usize, p: &SsmParams, reverse: bool) -> Vec<f64> {
    let (d, n) = (p.channels(), p.state_size());
    let a_log = p.a_log.data();
    let skip = p.d_skip.data();
    let wd = p.w_delta.weight.data();
    let bias = p.w_delta.bias.as_ref().expect("delta bias").data();
    let wb = p.w_b.weight.data();
    let wc = p.w_c.weight.data();
    let mut h = vec![vec![0.0; n]; d];
    let mut y = vec![0.0; l * d];
    let steps: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
    for t in steps {
        let xt = &x[t * d..(t + 1) * d];
        let mut bt = vec![0.0; n];
        let mut ct = vec![0.0; n];
        for s in 0..n {
            for i in 0..d {
                bt[s] += xt[i] * wb[i * n + s];
                ct[s] += xt[i] * wc[i * n + s];
            }
        }
        for ch in 0..d {
            let mut u = bias[ch];
            for i in 0..d {
                u += xt[i] * wd[i * d + ch];
            }
            let delta = softplus(u);
            let mut out = skip[ch] * xt[ch];
            for s in 0..n {
                let a = -a_log[ch * n + s].exp();
                h[ch][s] = (delta * a).exp() * h[ch][s] + delta * bt[s] * xt[ch];
                out += ct[s] * h[ch][s];
            }
            y[t * d + ch] = out;
        }
    }
    y
}

/// Parameters away from their initial values so every path is exercised.
pub fn random_ssm(rng: &mut RngStream, d: usize, n: usize) -> SsmParams {
    let mut p = SsmParams::new(rng, d, n);
    p.a_log = rng.normal_tensor(&[d, n], 0.7);
    p.d_skip = rng.normal_tensor(&[d], 1.0);
    p.w_delta.bias = Some(rng.normal_tensor(&[d], 1.0));
    p
}

pub struct ScanReport {
    pub instances: usize,
    pub max_abs_err: f64,
    pub symmetric: bool,
}

/// Vectorised scan against the naive recurrence on random `L <= 64`,
/// `d <= 8`, `n <= 8` instances, batched with `B <= 3` on every other one.
pub fn scan_oracle(instances: usize, seed: u64) -> ScanReport {
    let root = RngStream::new(seed);
    let mut max_abs_err: f64 = 0.0;
    let mut symmetric = true;
    for i in 0..instances {
        let mut rng = root.split(i as u64);
        let l = 1 + rng.below(64);
        let d = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let b = if i % 2 == 0 { 1 } else { 1 + rng.below(3) };
        let p = random_ssm(&mut rng, d, n);
        let x = rng.normal_tensor(&[l, b, d], 1.0);
        for dir in [Direction::Forward, Direction::Backward] {
            let y = ssm_scan(&x, &p, dir).expect("scan");
            for bi in 0..b {
                let xs: Vec<f64> = (0..l).flat_map(|t| x.data()[(t * b + bi) * d..][..d].to_vec()).collect();
                let want = naive_scan(&xs, l, &p, dir == Direction::Backward);
                for t in 0..l {
                    for ch in 0..d {
                        let got = y.data()[(t * b + bi) * d + ch];
                        max_abs_err = max_abs_err.max((got - want[t * d + ch]).abs());
                    }
                }
            }
        }
        // Backward scan is the forward scan of the reversed sequence, reversed.
        let back = ssm_scan(&x, &p, Direction::Backward).expect("scan");
        let via = ssm_scan(&x.flip(0).expect("flip"), &p, Direction::Forward)
            .expect("scan")
            .flip(0)
            .expect("flip");
        symmetric &= back.data() == via.data();
    }
    ScanReport {
        instances,
        max_abs_err,
        symmetric,
    }
}

/// Literal double sum over anchors and positives.
pub fn brute_supcon(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = rows.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<f64> = (0..n).map(|k| dot(&rows[i], &rows[k]) / tau).collect();
        let m = (0..n).filter(|&k| k != i).map(|k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..n).filter(|&k| k != i).map(|k| (logits[k] - m).exp()).sum::<f64>().ln();
        for &j in &positives {
            loss -= (logits[j] - lse) / positives.len() as f64;
        }
    }
    loss
}

pub fn unit_rows(rng: &mut RngStream, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = rng.normal_vec(dim, 1.0);
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(rows.concat(), &[rows.len(), rows[0].len()]).expect("rectangular rows")
}

/// Labels with at least one repeated class.
pub fn random_labels(rng: &mut RngStream, n: usize) -> Vec<usize> {
    loop {
        let k = 1 + rng.below(n / 2);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        if (0..n).any(|i| (0..i).any(|j| labels[j] == labels[i])) {
            return labels;
        }
    }
}

pub struct SupconReport {
    pub batches: usize,
    pub max_abs_err: f64,
    pub max_permutation_err: f64,
    pub identical_err: f64,
}

/// Vectorised supcon against the double sum on batches of 4 to 16.
pub fn supcon_oracle(batches: usize, seed: u64) -> SupconReport {
    let root = RngStream::new(seed);
    let mut max_abs_err: f64 = 0.0;
    let mut max_permutation_err: f64 = 0.0;
    for i in 0..batches {
        let mut rng = root.split(i as u64);
        let n = 4 + rng.below(13);
        let dim = 2 + rng.below(7);
        let tau = rng.uniform_range(0.1, 1.0);
        let rows = unit_rows(&mut rng, n, dim);
        let labels = random_labels(&mut rng, n);
        let got = supcon_loss(&to_tensor(&rows), &labels, tau).expect("supcon").item();
        max_abs_err = max_abs_err.max((got - brute_supcon(&rows, &labels, tau)).abs());

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let prows: Vec<Vec<f64>> = perm.iter().map(|&k| rows[k].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&k| labels[k]).collect();
        let permuted = supcon_loss(&to_tensor(&prows), &plabels, tau).expect("supcon").item();
        max_permutation_err = max_permutation_err.max((got - permuted).abs());
    }
    let same = vec![vec![0.6, 0.8, 0.0]; 8];
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let identical = supcon_loss(&to_tensor(&same), &labels, 0.1).expect("supcon").item();
    SupconReport {
        batches,
        max_abs_err,
        max_permutation_err,
        identical_err: (identical - SUPCON_IDENTICAL_8).abs(),
    }
}

pub fn small_dims() -> FusionDims {
    FusionDims {
        channels: 8,
        state_size: 4,
        embed_dim: 6,
        cond_hidden: 8,
    }
}

/// Largest `|f(x, z) - x|` of a freshly initialised stack over random inputs.
pub fn identity_at_init(kind: FusionKind, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let fusion = Fusion::new(&mut rng, kind, small_dims(), 3);
    let x = rng.normal_tensor(&[2, 8, 3, 5], 1.0);
    let z = rng.normal_tensor(&[2, 6], 1.0);
    let y = fusion.forward(&x, &z).expect("forward");
    y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
