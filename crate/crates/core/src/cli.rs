//! Command-line entry point.
//!
//! Configuration is layered: defaults, then `--config` file, then
//! `CLAST_<KEY>` environment variables, then `--set key=value`, then
//! `--seed` / `--deterministic` / `--run-dir`. Every subcommand writes the
//! result to `<run_dir>/config.resolved`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, ArgGroup, Args, Parser, Subcommand};
use clast_tensor::RngStream;

use crate::bench;
use crate::config::Config;
use crate::dataset::{build_dataset, load_png, save_png, Dataset, ImageSample, Role, StyleClass};
use crate::error::{ClastError, Result};
use crate::eval;
use crate::gradcheck;
use crate::losses::loss_csv;
use crate::model::checkpoint::Checkpoint;
use crate::model::{stylize, StyleNet, StyleRef};
use crate::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "clast", version, about = "Contrastive text- and image-guided style transfer on a synthetic dataset")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seeds both the dataset and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sequential execution; artifacts are reproducible for a fixed seed.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset, anchors and style classifier.
    BuildDataset,
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Stylise one image.
    Stylize(StylizeArgs),
    /// Score the stage-2 network on held-out contents.
    Eval,
    /// Painting-to-anchor score matrix and its row-argmax accuracy.
    AnalyzeCorrelation,
    /// Forward-pass timing of the fusion variants.
    BenchFusion {
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        state_size: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("style").required(true).args(["text", "style_image"])))]
pub struct StylizeArgs {
    #[arg(long, value_name = "PNG")]
    pub content: PathBuf,
    /// `style-<k>`, `<k>` or `photo`.
    #[arg(long, value_name = "CLASS")]
    pub text: Option<String>,
    #[arg(long, value_name = "PNG")]
    pub style_image: Option<PathBuf>,
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
    /// Defaults to the run's stage-2 checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();

    let cfg = match resolve_config(&cli, std::env::vars()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(code) => code,
        Err(e @ (ClastError::Config(_) | ClastError::Lookup(_))) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn resolve_config<I, K, V>(cli: &Cli, env: I) -> Result<Config>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut cfg = Config::new();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(env)?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ClastError::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ClastError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| ClastError::io(path, e))
}

/// Loads the run's dataset and checks it was built from the current config.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join(crate::dataset::MANIFEST_FILE).exists() {
        return Err(ClastError::Eval(format!(
            "no dataset at {}; run `clast build-dataset` first",
            dir.display()
        )));
    }
    let ds = Dataset::load(&dir)?;
    if ds.manifest.config != cfg.dataset {
        return Err(ClastError::Config(format!(
            "dataset at {} was built with a different configuration; rebuild it",
            dir.display()
        )));
    }
    Ok(ds)
}

/// `style-<k>`, a bare class index, or the unstyled class name.
pub fn parse_style_class(name: &str, classes: usize) -> Result<Option<usize>> {
    if name == StyleClass::NULL_NAME {
        return Ok(None);
    }
    let id = name
        .strip_prefix("style-")
        .unwrap_or(name)
        .parse::<usize>()
        .map_err(|_| ClastError::Lookup(format!("unknown style class `{name}`")))?;
    if id >= classes {
        return Err(ClastError::Lookup(format!("style class {id} out of range (have {classes})")));
    }
    Ok(Some(id))
}

fn execute(cmd: &Command, cfg: &Config) -> Result<i32> {
    let run_dir = &cfg.run_dir;
    write(&run_dir.join("config.resolved"), cfg.resolved())?;
    match cmd {
        Command::BuildDataset => {
            let dir = cfg.dataset_dir();
            let ds = build_dataset(&cfg.dataset, &dir)?;
            let clf = eval::train_deception_classifier(&ds)?;
            clf.save(&dir.join(eval::CLASSIFIER_FILE))?;
            println!(
                "dataset: {} contents ({} held out), {} paintings, {} classes",
                ds.contents.len(),
                ds.holdout_content_ids().len(),
                ds.paintings.len(),
                ds.num_classes()
            );
            println!("classifier train accuracy: {:.4}", clf.train_accuracy);
            println!("manifest hash: {}", ds.hash());
            println!("written to {}", dir.display());
        }
        Command::Train { stage: 1 } => {
            let ds = load_dataset(cfg)?;
            let ckpt_dir = run_dir.join("checkpoints");
            let out = guard(train::train_stage1(cfg, &ds, Some(&ckpt_dir)), &ckpt_dir, 1)?;
            out.checkpoint.save(&train::checkpoint_path(run_dir, 1))?;
            write(&run_dir.join("losses_stage1.csv"), train::stage1_csv(&out.log))?;
            let last = out.log.last().map_or(f64::NAN, |r| r.total);
            let held_out = eval::reconstruction_ssim(&ds, &out.net)?;
            println!("stage 1: {} steps, final loss {last:.5}", out.log.len());
            println!("held-out reconstruction SSIM: {held_out:.4}");
        }
        Command::Train { .. } => {
            let ds = load_dataset(cfg)?;
            let stage1 = Checkpoint::load(&train::checkpoint_path(run_dir, 1))?;
            let ckpt_dir = run_dir.join("checkpoints");
            let out = guard(train::train_stage2(cfg, &ds, &stage1, Some(&ckpt_dir)), &ckpt_dir, 2)?;
            out.checkpoint.save(&train::checkpoint_path(run_dir, 2))?;
            write(&run_dir.join("losses.csv"), loss_csv(&out.log))?;
            let last = out.log.last().map_or(f64::NAN, |r| r.total);
            println!("stage 2: {} steps, final loss {last:.5}", out.log.len());
        }
        Command::Stylize(args) => stylize_cmd(cfg, args)?,
        Command::Eval => {
            let ds = load_dataset(cfg)?;
            let clf = eval::dataset_classifier(&ds, &cfg.dataset_dir())?;
            let s1 = Checkpoint::load(&train::checkpoint_path(run_dir, 1))?;
            let stage1 = StyleNet::from_checkpoint(&s1, &mut RngStream::new(0))?;
            let s2 = Checkpoint::load(&train::checkpoint_path(run_dir, 2))?;
            let (net, _) = train::load_stage2(&s2, cfg.train.projection_dim)?;
            let (report, outputs, corr) = eval::evaluate(&ds, &net, &stage1, &clf, cfg.eval_contents, &cfg.hash())?;
            write(&run_dir.join("eval.json"), report.to_json()?)?;
            write(&run_dir.join("correlation.csv"), eval::correlation_csv(&corr, &ds.painting_labels()))?;
            let images = run_dir.join("images");
            for (_, styled, guide) in &outputs.entries {
                let class = styled.class_id.expect("styled");
                let name = format!("content{}_style-{class}_{guide}.png", styled.content_id);
                write(&images.join(name), crate::dataset::png_bytes(&styled.pixels)?)?;
            }
            println!("images: {} ({} text-guided)", report.images.len(), report.images.len() / 2);
            println!("mean s_style {:.4}  mean s_cont {:.4}  mean ssim {:.4}", report.mean_s_style, report.mean_s_cont, report.mean_ssim);
            println!("deception rate {:.4}  reconstruction ssim {:.4}", report.deception_rate, report.reconstruction_ssim);
        }
        Command::AnalyzeCorrelation => {
            let ds = load_dataset(cfg)?;
            let (m, acc) = ds.correlation()?;
            write(&run_dir.join("correlation.csv"), eval::correlation_csv(&m, &ds.painting_labels()))?;
            println!("row-argmax accuracy: {acc:.4}");
        }
        Command::BenchFusion { channels, state_size } => {
            let b = &cfg.bench;
            let results = bench::bench_all(&b.lengths, *channels, *state_size, b.repeats, b.warmup)?;
            write(&run_dir.join("bench.json"), serde_json::to_string_pretty(&results)?)?;
            println!("{:<14} {:>7} {:>12} {:>10} {:>9}", "variant", "L", "median ms", "iqr ms", "params");
            for r in &results {
                println!(
                    "{:<14} {:>7} {:>12.3} {:>10.3} {:>9}",
                    r.variant.tag(),
                    r.seq_len,
                    r.median_ms,
                    r.iqr_ms,
                    r.params
                );
                if let Some(note) = &r.note {
                    println!("  note: {note}");
                }
            }
        }
        Command::Gradcheck { instances, filter } => {
            let reports = gradcheck::run_suite(*instances, filter.as_deref())?;
            write(&run_dir.join("gradcheck.json"), serde_json::to_string_pretty(&reports)?)?;
            for r in &reports {
                println!(
                    "{} {:<28} rel {:.2e} abs {:.2e} ({} entries)",
                    if r.passed { "ok  " } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.max_abs_err,
                    r.entries
                );
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Saves the last good checkpoint of a diverged run before passing the error on.
fn guard<T>(r: Result<T>, ckpt_dir: &Path, stage: u8) -> Result<T> {
    if let Err(ClastError::Diverged { step, last_good }) = &r {
        let path = ckpt_dir.join(format!("stage{stage}_last_good.json"));
        last_good.save(&path)?;
        log::error!("stage {stage} diverged at step {step}; last good state in {}", path.display());
    }
    r
}

fn stylize_cmd(cfg: &Config, args: &StylizeArgs) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let style = match (&args.text, &args.style_image) {
        (Some(name), _) => StyleRef::Text(parse_style_class(name, ds.num_classes())?),
        (None, Some(path)) => StyleRef::Image(ImageSample {
            pixels: load_png(path)?,
            role: Role::Painting,
            class_id: None,
            content_id: 0,
        }),
        (None, None) => unreachable!("clap requires a style flag"),
    };
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| train::checkpoint_path(&cfg.run_dir, 2));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let net = StyleNet::from_checkpoint(&ckpt, &mut RngStream::new(0))?;
    let content = ImageSample {
        pixels: load_png(&args.content)?,
        role: Role::Content,
        class_id: None,
        content_id: 0,
    };
    let out = stylize(&content, &style, &net, ds.anchors(), ds.encoder())?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ClastError::io(parent, e))?;
    }
    save_png(&out.pixels, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
