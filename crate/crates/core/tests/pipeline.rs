use std::path::Path;
use std::process::Command;

use clast::config::{Config, DatasetConfig};
use clast::dataset::Dataset;
use clast::eval::{clip_scores, deception_rate, ssim, train_deception_classifier};
use clast::losses::{total_loss, LossTerms, LossWeights};
use clast::model::{named_params, Checkpoint, StyleNet};
use clast::train::{train_stage1, train_stage2};
use clast_tensor::{RngStream, Tensor};
use proptest::prelude::*;

fn tiny() -> Config {
    let mut c = Config::new();
    for (k, v) in [
        ("classes", "2"),
        ("paintings_per_class", "3"),
        ("contents", "8"),
        ("holdout", "2"),
        ("image_size", "16"),
        ("channels", "8"),
        ("state_size", "2"),
        ("depth", "1"),
        ("stage1_iterations", "3"),
        ("stage2_iterations", "2"),
        ("projection_dim", "8"),
        ("eval_contents", "1"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn bits(net: &StyleNet) -> Vec<(String, Vec<u64>)> {
    named_params(net)
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny();
    let net = StyleNet::new(&cfg.model, 12, &mut RngStream::new(3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    Checkpoint::capture(net.header("abc", 2, 7), &[("encoder", &net.encoder), ("fusion", &net.fusion), ("decoder", &net.decoder)])
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.header.step, 7);
    let back = StyleNet::from_checkpoint(&loaded, &mut RngStream::new(99)).unwrap();
    assert_eq!(bits(&net), bits(&back));
    let x = RngStream::new(4).uniform_tensor(&[1, 3, 16, 16], 0.0, 1.0);
    let z = RngStream::new(5).normal_tensor(&[1, 12], 1.0);
    assert_eq!(net.forward(&x, &z).unwrap().data(), back.forward(&x, &z).unwrap().data());
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let cfg = tiny().dataset;
    let a = Dataset::generate(&cfg).unwrap();
    let b = Dataset::generate(&cfg).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.paintings[0].pixels.data(), b.paintings[0].pixels.data());
    let other = Dataset::generate(&DatasetConfig { seed: cfg.seed + 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.hash(), other.hash());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.hash(), a.hash());
    for (x, y) in loaded.paintings.iter().zip(&a.paintings) {
        assert_eq!(x.pixels.data(), y.pixels.data());
    }
    assert_eq!(loaded.contents[1].pixels.data(), a.contents[1].pixels.data());
}

#[test]
fn clip_scores_of_an_unchanged_image() {
    let ds = Dataset::generate(&tiny().dataset).unwrap();
    let x = &ds.contents[0].pixels;
    let text = ds.anchors().encode_text(Some(1)).unwrap();
    let (s_cont, s_style) = clip_scores(x, x, &text, &ds).unwrap();
    assert!((s_cont - 1.0).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&s_style));
}

#[test]
fn deception_on_real_paintings_is_training_accuracy() {
    let ds = Dataset::generate(&tiny().dataset).unwrap();
    let clf = train_deception_classifier(&ds).unwrap();
    let real: Vec<(&Tensor, usize)> = ds.paintings.iter().map(|p| (&p.pixels, p.class_id.unwrap())).collect();
    assert!((deception_rate(&real, &clf).unwrap() - clf.train_accuracy).abs() < 1e-12);
    assert!(deception_rate(&[], &clf).is_err());
}

#[test]
fn ssim_decreases_with_noise() {
    let mut rng = RngStream::new(6);
    let x = rng.uniform_tensor(&[3, 24, 24], 0.2, 0.8);
    let mut last = ssim(&x, &x).unwrap();
    assert!((last - 1.0).abs() < 1e-12);
    for amp in [0.02, 0.05, 0.1, 0.2] {
        let noise = RngStream::new(7).normal_tensor(&[3, 24, 24], amp);
        let y = x.add(&noise).unwrap();
        let s = ssim(&x, &y).unwrap();
        assert!(s < last, "amp {amp}: {s} >= {last}");
        last = s;
    }
}

#[test]
fn total_gradient_is_weighted_sum_of_component_gradients() {
    let p = Tensor::param(vec![0.3, -0.7, 1.1], &[3]).unwrap();
    let build = |p: &Tensor| LossTerms {
        clip: Some(p.square().sum_all()),
        supcon: Some(p.exp().sum_all()),
        sty: Some(p.tanh().sum_all()),
        con: Some(p.abs().sum_all()),
        lpips: Some(p.sigmoid().sum_all()),
        unsup: None,
    };
    let w = LossWeights::default();
    total_loss(&build(&p), &w).unwrap().backward().unwrap();
    let total = p.grad().unwrap();
    let terms = build(&p);
    let mut want = [0.0; 3];
    for (t, wt) in [(&terms.clip, w.clip), (&terms.supcon, w.supcon), (&terms.sty, w.sty), (&terms.con, w.con), (&terms.lpips, w.lpips)] {
        p.zero_grad();
        t.as_ref().unwrap().backward().unwrap();
        for (a, g) in want.iter_mut().zip(p.grad().unwrap()) {
            *a += wt * g;
        }
    }
    for (a, b) in total.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(total_loss(&build(&p), &LossWeights::zero()).unwrap().item(), 0.0);
}

#[test]
fn stage_two_keeps_the_encoder_frozen() {
    let cfg = tiny();
    let ds = Dataset::generate(&cfg.dataset).unwrap();
    let s1 = train_stage1(&cfg, &ds, None).unwrap();
    let s2 = train_stage2(&cfg, &ds, &s1.checkpoint, None).unwrap();
    assert_eq!(s2.log.len(), 2);
    let enc = |n: &StyleNet| named_params(&n.encoder).into_iter().map(|(_, t)| t.to_vec()).collect::<Vec<_>>();
    assert_eq!(enc(&s1.net), enc(&s2.net));
    let dec = |n: &StyleNet| named_params(&n.decoder).into_iter().map(|(_, t)| t.to_vec()).collect::<Vec<_>>();
    assert_ne!(dec(&s1.net), dec(&s2.net));
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let mut cfg = tiny();
    let ds = Dataset::generate(&cfg.dataset).unwrap();
    let s1 = train_stage1(&cfg, &ds, None).unwrap();
    cfg.train.weights = LossWeights::zero();
    let s2 = train_stage2(&cfg, &ds, &s1.checkpoint, None).unwrap();
    let fresh = train_stage2(&Config { train: clast::config::TrainConfig { stage2_iterations: 0, ..cfg.train.clone() }, ..cfg.clone() }, &ds, &s1.checkpoint, None).unwrap();
    assert_eq!(bits(&s2.net), bits(&fresh.net));
    assert!(s2.log.iter().all(|r| r.total == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resolved_config_round_trips(
        seed in 0u64..1_000_000,
        classes in 1usize..12,
        lr in 1e-6f64..1e-1,
        temperature in 0.01f64..2.0,
        lambda in 0.0f64..100.0,
        lengths in prop::collection::vec(1usize..20_000, 1..5),
    ) {
        let mut c = Config::new();
        c.set("seed", &seed.to_string()).unwrap();
        c.set("classes", &classes.to_string()).unwrap();
        c.set("stage2_lr", &format!("{lr:?}")).unwrap();
        c.set("temperature", &format!("{temperature:?}")).unwrap();
        c.set("lambda_sty", &format!("{lambda:?}")).unwrap();
        let joined: Vec<String> = lengths.iter().map(usize::to_string).collect();
        c.set("bench_lengths", &joined.join(",")).unwrap();
        let mut back = Config::new();
        back.apply_text(&c.resolved()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let a = rng.uniform_tensor(&[3, 12, 10], 0.0, 1.0);
        let b = rng.uniform_tensor(&[3, 12, 10], 0.0, 1.0);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
    }
}

fn clast(cwd: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_clast"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn clast")
}

const TINY: &[&str] = &[
    "--set", "classes=2", "--set", "paintings_per_class=3", "--set", "contents=8", "--set", "holdout=2",
    "--set", "image_size=16", "--set", "channels=8", "--set", "state_size=2", "--set", "depth=1",
    "--set", "stage1_iterations=3", "--set", "stage2_iterations=2", "--set", "projection_dim=8",
    "--set", "eval_contents=1", "--run-dir", "run", "--deterministic",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn cli_usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let help = clast(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("build-dataset"));
    assert_eq!(clast(dir.path(), &["--version"]).status.code(), Some(0));

    let missing = clast(dir.path(), &["stylize", "--content", "a.png", "--out", "b.png"]);
    assert_eq!(missing.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&missing.stderr);
    assert!(msg.contains("--text") && msg.contains("--style-image"), "{msg}");

    assert_eq!(clast(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(clast(dir.path(), &["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(clast(dir.path(), &["train", "--stage", "3"]).status.code(), Some(1));
    let bad_key = clast(dir.path(), &["build-dataset", "--set", "nope=1"]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("nope"));
}

#[test]
fn cli_runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = clast(dir.path(), &with_tiny(&["train", "--stage", "1"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("build-dataset"));
    assert!(dir.path().join("run/config.resolved").exists());
}

#[test]
fn cli_tiny_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    for step in [
        vec!["build-dataset"],
        vec!["train", "--stage", "1"],
        vec!["train", "--stage", "2"],
        vec!["eval"],
        vec!["analyze-correlation"],
    ] {
        let out = clast(cwd, &with_tiny(&step));
        assert_eq!(out.status.code(), Some(0), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = cwd.join("run");
    for f in ["config.resolved", "losses.csv", "losses_stage1.csv", "eval.json", "correlation.csv", "checkpoints/stage1.json", "checkpoints/stage2.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(std::fs::read_to_string(run.join("losses.csv")).unwrap().starts_with("step,L_clip,L_supcon,L_sty,L_con,L_lpips,total"));
    let report: clast::eval::EvalReport = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    report.check_invariants().unwrap();
    assert_eq!(std::fs::read_dir(run.join("images")).unwrap().count(), report.images.len());

    let content = run.join("dataset/content_0.png");
    let content = content.to_str().unwrap();
    let text = clast(cwd, &with_tiny(&["stylize", "--content", content, "--text", "style-1", "--out", "out/t.png"]));
    assert_eq!(text.status.code(), Some(0), "{}", String::from_utf8_lossy(&text.stderr));
    let painting = run.join("dataset/painting_0_0.png");
    let image = clast(cwd, &with_tiny(&["stylize", "--content", content, "--style-image", painting.to_str().unwrap(), "--out", "out/i.png"]));
    assert_eq!(image.status.code(), Some(0), "{}", String::from_utf8_lossy(&image.stderr));
    assert!(cwd.join("out/t.png").exists() && cwd.join("out/i.png").exists());
    let unknown = clast(cwd, &with_tiny(&["stylize", "--content", content, "--text", "style-9", "--out", "out/x.png"]));
    assert_eq!(unknown.status.code(), Some(1));

    let gc = clast(cwd, &with_tiny(&["gradcheck", "--instances", "2", "--filter", "gram"]));
    assert_eq!(gc.status.code(), Some(0));
    assert!(run.join("gradcheck.json").exists());
}

#[test]
fn cli_environment_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_clast"))
        .args(["gradcheck", "--instances", "1", "--filter", "gram", "--run-dir", "run"])
        .env("CLAST_TEMPERATURE", "0.25")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let resolved = std::fs::read_to_string(dir.path().join("run/config.resolved")).unwrap();
    assert!(resolved.contains("temperature = 0.25"), "{resolved}");
}
