//! Run configuration.
//!
//! The on-disk format is one `key = value` pair per line; `#` starts a
//! comment. Later sources override earlier ones: built-in defaults, then the
//! config file, then `CLAST_<KEY>` environment variables (key upper-cased),
//! then command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ClastError, Result};
use crate::losses::LossWeights;
use crate::model::FusionKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub paintings_per_class: usize,
    pub contents: usize,
    /// Trailing content images reserved for evaluation.
    pub holdout: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub hue_bins: usize,
    pub hue_bandwidth: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            paintings_per_class: 8,
            contents: 96,
            holdout: 6,
            image_size: 32,
            embed_dim: 64,
            hue_bins: 8,
            hue_bandwidth: 0.25,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: FusionKind,
    pub channels: usize,
    pub state_size: usize,
    pub depth: usize,
    /// Hidden width of the adaLN conditioning MLP; 0 selects `channels`.
    pub cond_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: FusionKind::SsmAdaLn,
            channels: 64,
            state_size: 8,
            depth: 2,
            cond_hidden: 0,
        }
    }
}

impl ModelConfig {
    pub fn cond_hidden(&self) -> usize {
        if self.cond_hidden == 0 {
            self.channels
        } else {
            self.cond_hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_iterations: usize,
    pub stage1_batch: usize,
    pub stage1_lr: f64,
    pub stage1_perceptual: f64,
    pub stage2_iterations: usize,
    pub stage2_batch: usize,
    pub stage2_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub temperature: f64,
    pub projection_dim: usize,
    pub weights: LossWeights,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iterations: 2000,
            stage1_batch: 4,
            stage1_lr: 1e-4,
            stage1_perceptual: 1.0,
            stage2_iterations: 500,
            stage2_batch: 4,
            stage2_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 0.1,
            projection_dim: 128,
            weights: LossWeights::default(),
            checkpoint_every: 0,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 1024, 4096, 16384],
            repeats: 20,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/dataset`.
    pub dataset_dir: Option<PathBuf>,
    pub eval_contents: usize,
    pub deterministic: bool,
}

/// Every recognised key, in the order `config.resolved` lists them.
pub const KEYS: &[&str] = &[
    "seed",
    "run_dir",
    "dataset_dir",
    "deterministic",
    "classes",
    "paintings_per_class",
    "contents",
    "holdout",
    "image_size",
    "embed_dim",
    "hue_bins",
    "hue_bandwidth",
    "dataset_seed",
    "variant",
    "channels",
    "state_size",
    "depth",
    "cond_hidden",
    "stage1_iterations",
    "stage1_batch",
    "stage1_lr",
    "stage1_perceptual",
    "stage2_iterations",
    "stage2_batch",
    "stage2_lr",
    "beta1",
    "beta2",
    "adam_eps",
    "temperature",
    "projection_dim",
    "lambda_clip",
    "lambda_supcon",
    "lambda_sty",
    "lambda_con",
    "lambda_lpips",
    "lambda_unsup",
    "checkpoint_every",
    "eval_contents",
    "bench_lengths",
    "bench_repeats",
    "bench_warmup",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ClastError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(ClastError::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            run_dir: PathBuf::from("runs/default"),
            dataset_dir: None,
            eval_contents: 6,
            deterministic: false,
        }
    }
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.run_dir.join("dataset"))
    }

    /// `seed` sets the dataset and training seeds together.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.dataset;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => {
                let s: u64 = parse(key, value)?;
                d.seed = s;
                t.seed = s.wrapping_add(4);
            }
            "run_dir" => self.run_dir = PathBuf::from(value),
            "dataset_dir" => self.dataset_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "classes" => d.classes = parse(key, value)?,
            "paintings_per_class" => d.paintings_per_class = parse(key, value)?,
            "contents" => d.contents = parse(key, value)?,
            "holdout" => d.holdout = parse(key, value)?,
            "image_size" => d.image_size = parse(key, value)?,
            "embed_dim" => d.embed_dim = parse(key, value)?,
            "hue_bins" => d.hue_bins = parse(key, value)?,
            "hue_bandwidth" => d.hue_bandwidth = parse(key, value)?,
            "dataset_seed" => d.seed = parse(key, value)?,
            "variant" => m.variant = value.parse()?,
            "channels" => m.channels = parse(key, value)?,
            "state_size" => m.state_size = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "cond_hidden" => m.cond_hidden = parse(key, value)?,
            "stage1_iterations" => t.stage1_iterations = parse(key, value)?,
            "stage1_batch" => t.stage1_batch = parse(key, value)?,
            "stage1_lr" => t.stage1_lr = parse(key, value)?,
            "stage1_perceptual" => t.stage1_perceptual = parse(key, value)?,
            "stage2_iterations" => t.stage2_iterations = parse(key, value)?,
            "stage2_batch" => t.stage2_batch = parse(key, value)?,
            "stage2_lr" => t.stage2_lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "projection_dim" => t.projection_dim = parse(key, value)?,
            "lambda_clip" => t.weights.clip = parse(key, value)?,
            "lambda_supcon" => t.weights.supcon = parse(key, value)?,
            "lambda_sty" => t.weights.sty = parse(key, value)?,
            "lambda_con" => t.weights.con = parse(key, value)?,
            "lambda_lpips" => t.weights.lpips = parse(key, value)?,
            "lambda_unsup" => t.weights.unsup = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "eval_contents" => self.eval_contents = parse(key, value)?,
            "bench_lengths" => {
                self.bench.lengths = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "bench_repeats" => self.bench.repeats = parse(key, value)?,
            "bench_warmup" => self.bench.warmup = parse(key, value)?,
            _ => return Err(ClastError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        let v = match key {
            "seed" => d.seed.to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            "dataset_dir" => self.dataset_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "deterministic" => self.deterministic.to_string(),
            "classes" => d.classes.to_string(),
            "paintings_per_class" => d.paintings_per_class.to_string(),
            "contents" => d.contents.to_string(),
            "holdout" => d.holdout.to_string(),
            "image_size" => d.image_size.to_string(),
            "embed_dim" => d.embed_dim.to_string(),
            "hue_bins" => d.hue_bins.to_string(),
            "hue_bandwidth" => format!("{:?}", d.hue_bandwidth),
            "dataset_seed" => d.seed.to_string(),
            "variant" => m.variant.to_string(),
            "channels" => m.channels.to_string(),
            "state_size" => m.state_size.to_string(),
            "depth" => m.depth.to_string(),
            "cond_hidden" => m.cond_hidden.to_string(),
            "stage1_iterations" => t.stage1_iterations.to_string(),
            "stage1_batch" => t.stage1_batch.to_string(),
            "stage1_lr" => format!("{:?}", t.stage1_lr),
            "stage1_perceptual" => format!("{:?}", t.stage1_perceptual),
            "stage2_iterations" => t.stage2_iterations.to_string(),
            "stage2_batch" => t.stage2_batch.to_string(),
            "stage2_lr" => format!("{:?}", t.stage2_lr),
            "beta1" => format!("{:?}", t.beta1),
            "beta2" => format!("{:?}", t.beta2),
            "adam_eps" => format!("{:?}", t.adam_eps),
            "temperature" => format!("{:?}", t.temperature),
            "projection_dim" => t.projection_dim.to_string(),
            "lambda_clip" => format!("{:?}", t.weights.clip),
            "lambda_supcon" => format!("{:?}", t.weights.supcon),
            "lambda_sty" => format!("{:?}", t.weights.sty),
            "lambda_con" => format!("{:?}", t.weights.con),
            "lambda_lpips" => format!("{:?}", t.weights.lpips),
            "lambda_unsup" => format!("{:?}", t.weights.unsup),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "eval_contents" => self.eval_contents.to_string(),
            "bench_lengths" => {
                let v: Vec<String> = self.bench.lengths.iter().map(usize::to_string).collect();
                v.join(",")
            }
            "bench_repeats" => self.bench.repeats.to_string(),
            "bench_warmup" => self.bench.warmup.to_string(),
            _ => return None,
        };
        Some(v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ClastError::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| ClastError::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `CLAST_<KEY>` overrides from the given variables.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(key) = k.as_ref().strip_prefix("CLAST_") {
                let key = key.to_ascii_lowercase();
                if KEYS.contains(&key.as_str()) {
                    self.set(&key, v.as_ref())?;
                }
            }
        }
        Ok(())
    }

    /// `key = value` lines for every key, re-parseable by [`Config::apply_text`].
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            if *key == "dataset_seed" {
                continue;
            }
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        // Training seed is derived; pin the dataset seed after `seed`.
        let _ = writeln!(s, "dataset_seed = {}", self.dataset.seed);
        s
    }

    /// SHA-256 of the resolved configuration without the path keys, so runs
    /// in different directories hash alike.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text: String = self
            .resolved()
            .lines()
            .filter(|l| !l.starts_with("run_dir ") && !l.starts_with("dataset_dir "))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes < 1 || d.paintings_per_class < 1 || d.contents < 2 {
            return Err(ClastError::Config("dataset needs classes >= 1, paintings >= 1, contents >= 2".into()));
        }
        if d.holdout >= d.contents {
            return Err(ClastError::Config("holdout must leave at least one training content".into()));
        }
        if self.train.stage1_lr <= 0.0 || self.train.stage2_lr <= 0.0 {
            return Err(ClastError::Config("learning rate must be positive".into()));
        }
        if self.train.stage2_batch < 2 {
            return Err(ClastError::Config("stage-2 batch must be >= 2 for contrastive pairs".into()));
        }
        if self.model.channels == 0 || self.model.depth == 0 || self.model.state_size == 0 {
            return Err(ClastError::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}
