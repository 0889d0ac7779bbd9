mod common;

use clast::losses::{
    directional_clip_loss, normalized_gram, style_gram_loss, supcon_loss, supcon_total, unsup_contrastive_loss,
    ProjectionHead,
};
use clast::model::fusion::{attention_weights, linear_attention, self_attention, FusionKind, QkvProj};
use clast_tensor::{RngStream, Tensor};
use common::*;
use proptest::prelude::*;

#[test]
fn scan_matches_naive_recurrence() {
    let r = scan_oracle(50, 17);
    assert!(r.max_abs_err < SCAN_TOL, "max abs err {:e}", r.max_abs_err);
    assert!(r.symmetric);
}

#[test]
fn supcon_matches_double_sum() {
    let r = supcon_oracle(30, 23);
    assert!(r.max_abs_err < SUPCON_TOL, "max abs err {:e}", r.max_abs_err);
    assert!(r.max_permutation_err < PERMUTATION_TOL, "permutation err {:e}", r.max_permutation_err);
    assert!(r.identical_err < 1e-12);
}

#[test]
fn identical_embeddings_constant_is_the_double_sum() {
    let same = vec![vec![1.0, 0.0]; 8];
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    for tau in [0.05, 0.1, 1.0] {
        assert!((brute_supcon(&same, &labels, tau) - SUPCON_IDENTICAL_8).abs() < 1e-12);
    }
}

#[test]
fn adaln_variants_are_identity_at_init() {
    for (i, kind) in [FusionKind::SsmAdaLn, FusionKind::LinAttnAdaLn].into_iter().enumerate() {
        assert_eq!(identity_at_init(kind, 5 + i as u64), 0.0, "{kind}");
    }
    assert!(identity_at_init(FusionKind::AttnAdaIn, 5) > 0.0);
}

fn qkv(rng: &mut RngStream, d: usize) -> QkvProj {
    QkvProj::new(rng, d)
}

fn rows_of(t: &Tensor, b: usize, l: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..b)
        .map(|bi| (0..l).map(|i| t.data()[(bi * l + i) * d..][..d].to_vec()).collect())
        .collect()
}

fn project(rows: &[Vec<f64>], lin: &clast::model::layers::Linear) -> Vec<Vec<f64>> {
    let w = lin.weight.data();
    let b = lin.bias.as_ref().unwrap().data();
    let (din, dout) = (lin.weight.shape()[0], lin.weight.shape()[1]);
    rows.iter()
        .map(|r| (0..dout).map(|j| b[j] + (0..din).map(|i| r[i] * w[i * dout + j]).sum::<f64>()).collect())
        .collect()
}

#[test]
fn linear_attention_matches_explicit_sums() {
    let mut rng = RngStream::new(8);
    let (b, l, d) = (2, 7, 4);
    let p = qkv(&mut rng, d);
    let x = rng.normal_tensor(&[b, l, d], 1.0);
    let got = linear_attention(&x, &p).unwrap();
    let phi = |v: f64| if v > 0.0 { v + 1.0 } else { v.exp() };
    for (bi, rows) in rows_of(&x, b, l, d).iter().enumerate() {
        let q = project(rows, &p.q);
        let k = project(rows, &p.k);
        let v = project(rows, &p.v);
        for i in 0..l {
            let w: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|c| phi(q[i][c]) * phi(k[j][c])).sum::<f64>())
                .collect();
            let total: f64 = w.iter().sum();
            for c in 0..d {
                let want = (0..l).map(|j| w[j] * v[j][c]).sum::<f64>() / total;
                let have = got.data()[(bi * l + i) * d + c];
                assert!((want - have).abs() < 1e-12, "{want} vs {have}");
            }
        }
    }
}

#[test]
fn softmax_attention_matches_explicit_sums() {
    let mut rng = RngStream::new(9);
    let (b, l, d) = (1, 6, 3);
    let p = qkv(&mut rng, d);
    let x = rng.normal_tensor(&[b, l, d], 1.0);
    let got = self_attention(&x, &p).unwrap();
    let weights = attention_weights(&x, &p).unwrap();
    let rows = &rows_of(&x, b, l, d)[0];
    let (q, k, v) = (project(rows, &p.q), project(rows, &p.k), project(rows, &p.v));
    for i in 0..l {
        let s: Vec<f64> = (0..l)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..l {
            assert!((weights.data()[i * l + j] - e[j] / z).abs() < 1e-12);
        }
        for c in 0..d {
            let want = (0..l).map(|j| e[j] / z * v[j][c]).sum::<f64>();
            assert!((got.data()[i * d + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn nt_xent_is_supcon_with_pair_labels() {
    let mut rng = RngStream::new(10);
    for m in [2, 3, 6] {
        let za = to_tensor(&unit_rows(&mut rng, m, 5));
        let zb = to_tensor(&unit_rows(&mut rng, m, 5));
        let labels: Vec<usize> = (0..m).chain(0..m).collect();
        let z = Tensor::concat(&[za.clone(), zb.clone()], 0).unwrap();
        let a = unsup_contrastive_loss(&za, &zb, 0.2).unwrap().item();
        let b = supcon_loss(&z, &labels, 0.2).unwrap().item();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn nt_xent_two_orthogonal_pairs() {
    // Pairs (e1, e1) and (e2, e2) at tau = 1: each sample sees logits
    // {1, 0, 0} for (partner, other, other), so the loss is 4 ln((e + 2) / e).
    let za = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let want = 4.0 * ((std::f64::consts::E + 2.0) / std::f64::consts::E).ln();
    let got = unsup_contrastive_loss(&za, &za, 1.0).unwrap().item();
    assert!((got - want).abs() < 1e-12);
    assert_eq!(unsup_contrastive_loss(&za.narrow(0, 0, 1).unwrap(), &za.narrow(0, 0, 1).unwrap(), 1.0).unwrap().item(), 0.0);
}

#[test]
fn supcon_total_is_three_pairings() {
    let mut rng = RngStream::new(11);
    let head = ProjectionHead::new(&mut rng, 6, 4);
    let labels = [0, 1, 0, 1];
    let a = to_tensor(&unit_rows(&mut rng, 4, 6));
    let b = to_tensor(&unit_rows(&mut rng, 4, 6));
    let c = to_tensor(&unit_rows(&mut rng, 4, 6));
    let doubled: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let pair = |x: &Tensor, y: &Tensor| {
        let z = head.forward(&Tensor::concat(&[x.clone(), y.clone()], 0).unwrap()).unwrap();
        supcon_loss(&z, &doubled, 0.1).unwrap().item()
    };
    let want = pair(&a, &b) + pair(&c, &b) + pair(&c, &a);
    let got = supcon_total(&a, &b, &c, &labels, &head, 0.1).unwrap().item();
    assert!((got - want).abs() < 1e-12);
    let same = supcon_total(&a, &a, &a, &labels, &head, 0.1).unwrap().item();
    assert!((same - 3.0 * pair(&a, &a)).abs() < 1e-12);
    assert!(supcon_total(&a, &b, &c.narrow(0, 0, 3).unwrap(), &labels, &head, 0.1).is_err());
}

#[test]
fn supcon_gradient_reaches_text_guided_outputs() {
    let mut rng = RngStream::new(12);
    let head = ProjectionHead::new(&mut rng, 6, 4);
    let labels = [0, 1, 0, 1];
    let a = to_tensor(&unit_rows(&mut rng, 4, 6));
    let t = to_tensor(&unit_rows(&mut rng, 4, 6)).requires_grad_(true);
    let s = to_tensor(&unit_rows(&mut rng, 4, 6));
    supcon_total(&a, &t, &s, &labels, &head, 0.1).unwrap().backward().unwrap();
    assert!(t.grad().unwrap().iter().any(|g| g.abs() > 0.0));
}

#[test]
fn gram_loss_matches_hand_computation() {
    let mut rng = RngStream::new(13);
    let a = rng.normal_tensor(&[1, 3, 2, 2], 1.0);
    let b = rng.normal_tensor(&[1, 3, 2, 2], 1.0);
    let gram = |t: &Tensor| {
        let d = t.data();
        let mut g = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                g[i * 3 + j] = (0..4).map(|p| d[i * 4 + p] * d[j * 4 + p]).sum::<f64>() / 12.0;
            }
        }
        g
    };
    let want: f64 = gram(&a).iter().zip(gram(&b)).map(|(x, y)| (x - y).abs()).sum();
    let got = style_gram_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap().item();
    assert!((got - want).abs() < 1e-10);
    for (x, y) in normalized_gram(&a).unwrap().data().iter().zip(gram(&a)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn supcon_rewards_closer_positives() {
    let mut rng = RngStream::new(14);
    let rows = unit_rows(&mut rng, 6, 4);
    let labels = [0, 0, 1, 1, 2, 2];
    let base = brute_supcon(&rows, &labels, 0.1);
    // Rotate sample 1 partway towards sample 0.
    let mut moved = rows.clone();
    let mix: Vec<f64> = rows[1].iter().zip(&rows[0]).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
    let n = mix.iter().map(|v| v * v).sum::<f64>().sqrt();
    moved[1] = mix.iter().map(|v| v / n).collect();
    let vec_loss = |r: &[Vec<f64>]| supcon_loss(&to_tensor(r), &labels, 0.1).unwrap().item();
    assert!(vec_loss(&moved) < vec_loss(&rows));
    assert!((vec_loss(&rows) - base).abs() < 1e-10);
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn directional_loss_is_bounded_and_scale_free(
        di in vec_strategy(5),
        dt in vec_strategy(5),
        alpha in 0.1f64..10.0,
        beta in 0.1f64..10.0,
    ) {
        let ni = di.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = dt.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(ni > 1e-3 && nt > 1e-3);
        let zeros = Tensor::zeros(&[1, 5]);
        let eval = |a: f64, b: f64| {
            let zo = Tensor::new(di.iter().map(|v| v * a).collect(), &[1, 5]).unwrap();
            let tt = Tensor::new(dt.iter().map(|v| v * b).collect(), &[1, 5]).unwrap();
            directional_clip_loss(&zo, &zeros, &tt, &Tensor::zeros(&[5]), 1e-9).unwrap().loss.item()
        };
        let l = eval(1.0, 1.0);
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!((eval(alpha, beta) - l).abs() < 1e-12);
    }

    #[test]
    fn supcon_is_permutation_invariant(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let n = 4 + rng.below(13);
        let rows = unit_rows(&mut rng, n, 5);
        let labels = random_labels(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let a = supcon_loss(&to_tensor(&rows), &labels, 0.2).unwrap().item();
        let prows: Vec<Vec<f64>> = perm.iter().map(|&k| rows[k].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&k| labels[k]).collect();
        let b = supcon_loss(&to_tensor(&prows), &plabels, 0.2).unwrap().item();
        prop_assert!((a - b).abs() < PERMUTATION_TOL);
    }

    #[test]
    fn nt_xent_is_permutation_invariant(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let m = 2 + rng.below(6);
        let za = unit_rows(&mut rng, m, 4);
        let zb = unit_rows(&mut rng, m, 4);
        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let pa: Vec<Vec<f64>> = perm.iter().map(|&k| za[k].clone()).collect();
        let pb: Vec<Vec<f64>> = perm.iter().map(|&k| zb[k].clone()).collect();
        let a = unsup_contrastive_loss(&to_tensor(&za), &to_tensor(&zb), 0.3).unwrap().item();
        let b = unsup_contrastive_loss(&to_tensor(&pa), &to_tensor(&pb), 0.3).unwrap().item();
        prop_assert!((a - b).abs() < PERMUTATION_TOL);
    }

    #[test]
    fn gram_loss_is_symmetric_and_nonnegative(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let a = rng.normal_tensor(&[2, 3, 3, 2], 1.0);
        let b = rng.normal_tensor(&[2, 3, 3, 2], 1.0);
        let ab = style_gram_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap().item();
        let ba = style_gram_loss(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap().item();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(style_gram_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap().item(), 0.0);
    }

    #[test]
    fn scan_is_causal(seed in 0u64..10_000) {
        // Changing the last token leaves every earlier forward output alone.
        let mut rng = RngStream::new(seed);
        let (l, d, n) = (2 + rng.below(10), 1 + rng.below(4), 1 + rng.below(4));
        let p = random_ssm(&mut rng, d, n);
        let x = rng.normal_tensor(&[l, d], 1.0);
        let mut bumped = x.to_vec();
        bumped[(l - 1) * d] += 1.0;
        let bumped = Tensor::new(bumped, &[l, d]).unwrap();
        let y0 = clast::model::ssm_scan(&x, &p, clast::model::Direction::Forward).unwrap();
        let y1 = clast::model::ssm_scan(&bumped, &p, clast::model::Direction::Forward).unwrap();
        prop_assert_eq!(&y0.data()[..(l - 1) * d], &y1.data()[..(l - 1) * d]);
    }
}
