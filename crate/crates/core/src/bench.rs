//! Forward-pass benchmark of the fusion variants over sequence length.

use std::time::{Duration, Instant};

use clast_tensor::{allocated_floats, reset_allocated_floats, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ClastError, Result};
use crate::model::fusion::{Fusion, FusionDims, FusionKind};
use crate::model::layers::count_params as count_module_params;

pub const MIN_REPEATS: usize = 20;
pub const MIN_WARMUP: usize = 3;
/// Repeats are doubled while the timer resolution exceeds this fraction of the median.
const RESOLUTION_FRACTION: f64 = 0.01;
const MAX_REPEATS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildProfile {
    pub profile: String,
    pub opt_level: String,
    pub debug_assertions: bool,
    pub float_bits: u32,
    pub threads: usize,
}

impl BuildProfile {
    pub fn current() -> Self {
        Self {
            profile: env!("CLAST_BUILD_PROFILE").to_string(),
            opt_level: env!("CLAST_BUILD_OPT_LEVEL").to_string(),
            debug_assertions: cfg!(debug_assertions),
            float_bits: 64,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: FusionKind,
    /// Tokens, `h * w` of a square feature map.
    pub seq_len: usize,
    pub channels: usize,
    pub state_size: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub params: usize,
    /// Floats allocated by one forward pass.
    pub allocated_floats: u64,
    /// Set when repeats were raised because the timer was too coarse.
    pub note: Option<String>,
    pub build: BuildProfile,
}

pub fn bench_dims(channels: usize, state_size: usize) -> FusionDims {
    FusionDims {
        channels,
        state_size,
        embed_dim: channels,
        cond_hidden: channels,
    }
}

/// Exact parameter count of one fusion block of `variant`.
pub fn count_params(variant: FusionKind, channels: usize, state_size: usize) -> usize {
    let f = Fusion::new(&mut RngStream::new(0), variant, bench_dims(channels, state_size), 1);
    count_module_params(&f)
}

/// Smallest nonzero step of the monotonic clock, sampled.
fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let t = Instant::now();
        let mut e = t.elapsed();
        while e.is_zero() {
            e = t.elapsed();
        }
        best = best.min(e);
    }
    best
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times single-block forward passes on a seeded square `[1, d, s, s]` map.
/// `seq_len` is rounded up to the next square.
pub fn bench_fusion(variant: FusionKind, seq_len: usize, channels: usize, state_size: usize, repeats: usize, warmup: usize) -> Result<BenchResult> {
    if repeats < MIN_REPEATS || warmup < MIN_WARMUP {
        return Err(ClastError::Config(format!(
            "benchmark needs at least {MIN_REPEATS} repeats and {MIN_WARMUP} warmup runs"
        )));
    }
    if seq_len == 0 {
        return Err(ClastError::Config("sequence length must be positive".into()));
    }
    let side = (seq_len as f64).sqrt().ceil() as usize;
    let rng = RngStream::new(seq_len as u64);
    let dims = bench_dims(channels, state_size);
    let fusion = Fusion::new(&mut rng.split(0), variant, dims, 1);
    let x = rng.split(1).normal_tensor(&[1, channels, side, side], 1.0);
    let z = rng.split(2).normal_tensor(&[1, dims.embed_dim], 1.0);
    let run = || -> Result<Tensor> { clast_tensor::no_grad(|| fusion.forward(&x, &z)) };

    for _ in 0..warmup {
        run()?;
    }
    reset_allocated_floats();
    run()?;
    let allocated = allocated_floats();

    let resolution = timer_resolution().as_secs_f64() * 1e3;
    let mut repeats = repeats;
    let mut note = None;
    loop {
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            let y = run()?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            drop(y);
        }
        times.sort_by(f64::total_cmp);
        let median = quantile(&times, 0.5);
        if resolution > RESOLUTION_FRACTION * median && repeats < MAX_REPEATS {
            repeats *= 2;
            note = Some(format!("timer resolution {resolution:.2e} ms is coarse; repeats raised to {repeats}"));
            log::warn!("{}", note.as_deref().unwrap_or_default());
            continue;
        }
        return Ok(BenchResult {
            variant,
            seq_len: side * side,
            channels,
            state_size,
            repeats,
            warmup,
            median_ms: median,
            iqr_ms: quantile(&times, 0.75) - quantile(&times, 0.25),
            params: count_params(variant, channels, state_size),
            allocated_floats: allocated,
            note,
            build: BuildProfile::current(),
        });
    }
}

/// Every variant at every length, run sequentially.
pub fn bench_all(lengths: &[usize], channels: usize, state_size: usize, repeats: usize, warmup: usize) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for &l in lengths {
        for kind in FusionKind::ALL {
            let r = bench_fusion(kind, l, channels, state_size, repeats, warmup)?;
            log::info!("{kind} L={}: median {:.3} ms (iqr {:.3})", r.seq_len, r.median_ms, r.iqr_ms);
            out.push(r);
        }
    }
    Ok(out)
}

pub fn median_of(results: &[BenchResult], variant: FusionKind, seq_len: usize) -> Option<f64> {
    results.iter().find(|r| r.variant == variant && r.seq_len == seq_len).map(|r| r.median_ms)
}
