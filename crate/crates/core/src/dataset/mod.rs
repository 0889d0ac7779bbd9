//! Synthetic artists-and-paintings dataset and its joint embedding space.

pub mod descriptor;
pub mod embed;
pub mod render;

use std::fmt::Write as _;
use std::path::Path;

use clast_tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use descriptor::{style_descriptor, DescriptorConfig, DESCRIPTOR_DIM};
pub use embed::{correlation_matrix, row_argmax, AnchorTable, JointEncoder};
pub use render::{apply_style, ImageSample, Role, StyleClass, StyleParams};

use crate::config::DatasetConfig;
use crate::error::{ClastError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentEntry {
    pub id: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaintingEntry {
    pub class: usize,
    pub content_id: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub rng: String,
    pub config: DatasetConfig,
    pub classes: Vec<StyleClass>,
    pub null_class: StyleClass,
    pub contents: Vec<ContentEntry>,
    pub paintings: Vec<PaintingEntry>,
    pub encoder: JointEncoder,
    pub anchors: AnchorTable,
    /// SHA-256 over this manifest (with an empty hash) and every PNG file.
    pub hash: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub contents: Vec<ImageSample>,
    pub paintings: Vec<ImageSample>,
}

fn content_file(id: usize) -> String {
    format!("content_{id}.png")
}

fn painting_file(class: usize, id: usize) -> String {
    format!("painting_{class}_{id}.png")
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a ImageSample>) -> Result<Tensor> {
    let px: Vec<Tensor> = images.into_iter().map(|s| s.pixels.clone()).collect();
    if px.is_empty() {
        return Err(ClastError::Shape("no images to stack".into()));
    }
    Ok(Tensor::stack(&px)?)
}

pub fn png_bytes(pixels: &Tensor) -> Result<Vec<u8>> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(ClastError::Shape(format!("expected [3, H, W] pixels, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = pixels.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized for image");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(pixels: &Tensor, path: &Path) -> Result<()> {
    let bytes = png_bytes(pixels)?;
    std::fs::write(path, bytes).map_err(|e| ClastError::io(path, e))
}

/// Reads an RGB PNG as `[3, H, W]` in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut d = vec![0.0; 3 * h * w];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            d[c * h * w + p] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(d, &[3, h, w])?)
}

fn quantized(pixels: Tensor) -> Tensor {
    let d = pixels.data().iter().map(|&v| render::quantize(v)).collect();
    Tensor::new(d, pixels.shape()).expect("shape preserved")
}

impl Dataset {
    /// Renders everything in memory. Each image draws from its own substream
    /// of the master seed, so generation order does not affect pixels.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.paintings_per_class < 2 || cfg.contents < 2 {
            return Err(ClastError::Config("dataset needs classes >= 2, paintings_per_class >= 2, contents >= 2".into()));
        }
        if cfg.paintings_per_class > cfg.contents {
            return Err(ClastError::Config(format!(
                "paintings_per_class ({}) exceeds contents ({})",
                cfg.paintings_per_class, cfg.contents
            )));
        }
        if cfg.holdout >= cfg.contents {
            return Err(ClastError::Config("holdout must leave at least one training content".into()));
        }
        if cfg.image_size < 8 || !cfg.image_size.is_multiple_of(8) {
            return Err(ClastError::Config(format!("image size {} must be a positive multiple of 8", cfg.image_size)));
        }
        let root = RngStream::new(cfg.seed);
        let content_rng = root.split(1);
        let contents: Vec<ImageSample> = (0..cfg.contents)
            .map(|id| ImageSample {
                pixels: render::render_content(&mut content_rng.split(id as u64), cfg.image_size),
                role: Role::Content,
                class_id: None,
                content_id: id,
            })
            .collect();

        let params = render::draw_class_params(&mut root.split(2), cfg.classes);
        let classes: Vec<StyleClass> = params
            .into_iter()
            .enumerate()
            .map(|(id, params)| StyleClass {
                id: Some(id),
                name: StyleClass::class_name(id),
                params,
            })
            .collect();

        let pick_rng = root.split(3);
        let mut paintings = Vec::with_capacity(cfg.classes * cfg.paintings_per_class);
        let mut painting_entries = Vec::new();
        for class in &classes {
            let c = class.id.expect("real class");
            let mut ids: Vec<usize> = (0..cfg.contents).collect();
            pick_rng.split(c as u64).shuffle(&mut ids);
            let mut chosen = ids[..cfg.paintings_per_class].to_vec();
            chosen.sort_unstable();
            for id in chosen {
                let mut p = apply_style(&contents[id], class, 1.0);
                p.pixels = quantized(p.pixels);
                paintings.push(p);
                painting_entries.push(PaintingEntry {
                    class: c,
                    content_id: id,
                    file: painting_file(c, id),
                });
            }
        }

        let descriptor = DescriptorConfig {
            hue_bins: cfg.hue_bins,
            hue_bandwidth: cfg.hue_bandwidth,
        };
        let all = stack_images(contents.iter().chain(&paintings))?;
        let encoder = JointEncoder::fit(descriptor, cfg.embed_dim, &all, &mut root.split(4))?;
        let mut manifest = DatasetManifest {
            format: FORMAT,
            rng: RngStream::ALGORITHM.into(),
            config: cfg.clone(),
            classes,
            null_class: StyleClass::null(),
            contents: (0..cfg.contents).map(|id| ContentEntry { id, file: content_file(id) }).collect(),
            paintings: painting_entries,
            encoder,
            anchors: AnchorTable {
                embed_dim: cfg.embed_dim,
                classes: Vec::new(),
                null: Vec::new(),
            },
            hash: String::new(),
        };
        let mut ds = Dataset {
            manifest: manifest.clone(),
            contents,
            paintings,
        };
        manifest.anchors = ds.calibrate_anchors()?;
        ds.manifest = manifest;
        ds.manifest.hash = ds.compute_hash()?;
        Ok(ds)
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.manifest.config
    }

    pub fn encoder(&self) -> &JointEncoder {
        &self.manifest.encoder
    }

    pub fn anchors(&self) -> &AnchorTable {
        &self.manifest.anchors
    }

    pub fn hash(&self) -> &str {
        &self.manifest.hash
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn class(&self, id: usize) -> Result<&StyleClass> {
        self.manifest
            .classes
            .get(id)
            .ok_or_else(|| ClastError::Lookup(format!("unknown style class {id}")))
    }

    pub fn painting_labels(&self) -> Vec<usize> {
        self.paintings.iter().map(|p| p.class_id.expect("painting has class")).collect()
    }

    pub fn paintings_of(&self, class: usize) -> Vec<usize> {
        (0..self.paintings.len()).filter(|&i| self.paintings[i].class_id == Some(class)).collect()
    }

    pub fn train_content_ids(&self) -> Vec<usize> {
        (0..self.contents.len() - self.config().holdout).collect()
    }

    pub fn holdout_content_ids(&self) -> Vec<usize> {
        (self.contents.len() - self.config().holdout..self.contents.len()).collect()
    }

    pub fn content_batch(&self, ids: &[usize]) -> Result<Tensor> {
        stack_images(ids.iter().map(|&i| &self.contents[i]))
    }

    pub fn painting_batch(&self, ids: &[usize]) -> Result<Tensor> {
        stack_images(ids.iter().map(|&i| &self.paintings[i]))
    }

    pub fn painting_embeddings(&self) -> Result<Tensor> {
        self.encoder().encode_detached(&stack_images(&self.paintings)?, 64)
    }

    pub fn content_embeddings(&self) -> Result<Tensor> {
        self.encoder().encode_detached(&stack_images(&self.contents)?, 64)
    }

    /// Anchors from the current images and encoder.
    pub fn calibrate_anchors(&self) -> Result<AnchorTable> {
        AnchorTable::calibrate(
            self.num_classes(),
            &self.painting_embeddings()?,
            &self.painting_labels(),
            &self.content_embeddings()?,
        )
    }

    /// Painting-by-class score matrix and its row-argmax accuracy.
    pub fn correlation(&self) -> Result<(Tensor, f64)> {
        let m = correlation_matrix(&self.painting_embeddings()?, self.anchors())?;
        let hits = row_argmax(&m).iter().zip(self.painting_labels()).filter(|(a, b)| **a == *b).count();
        Ok((m, hits as f64 / self.paintings.len() as f64))
    }

    fn compute_hash(&self) -> Result<String> {
        let mut m = self.manifest.clone();
        m.hash.clear();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&m)?);
        for img in self.contents.iter().chain(&self.paintings) {
            h.update(png_bytes(&img.pixels)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ClastError::io(dir, e))?;
        for (img, e) in self.contents.iter().zip(&self.manifest.contents) {
            save_png(&img.pixels, &dir.join(&e.file))?;
        }
        for (img, e) in self.paintings.iter().zip(&self.manifest.paintings) {
            save_png(&img.pixels, &dir.join(&e.file))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json).map_err(|e| ClastError::io(&path, e))?;
        export_anchors_csv(self.anchors(), &dir.join("anchors.csv"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| ClastError::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let contents = manifest
            .contents
            .iter()
            .map(|e| {
                Ok(ImageSample {
                    pixels: load_png(&dir.join(&e.file))?,
                    role: Role::Content,
                    class_id: None,
                    content_id: e.id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let paintings = manifest
            .paintings
            .iter()
            .map(|e| {
                Ok(ImageSample {
                    pixels: load_png(&dir.join(&e.file))?,
                    role: Role::Painting,
                    class_id: Some(e.class),
                    content_id: e.content_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            manifest,
            contents,
            paintings,
        };
        let actual = ds.compute_hash()?;
        if actual != ds.manifest.hash {
            log::warn!("dataset at {} does not match its manifest hash", dir.display());
        }
        Ok(ds)
    }
}

/// Generates the dataset and writes it under `dir`.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(cfg)?;
    ds.save(dir)?;
    log::info!(
        "dataset: {} contents, {} paintings, {} classes -> {}",
        ds.contents.len(),
        ds.paintings.len(),
        ds.num_classes(),
        dir.display()
    );
    Ok(ds)
}

/// One row per embedding; the first column is the label.
pub fn embeddings_csv(labels: &[String], embs: &Tensor) -> String {
    let dim = embs.shape().last().copied().unwrap_or(0).max(1);
    let mut s = String::new();
    for (label, row) in labels.iter().zip(embs.data().chunks(dim)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{label},{}", cells.join(","));
    }
    s
}

pub fn export_anchors_csv(anchors: &AnchorTable, path: &Path) -> Result<()> {
    let mut labels: Vec<String> = (0..anchors.num_classes()).map(StyleClass::class_name).collect();
    labels.push(StyleClass::NULL_NAME.into());
    let mut rows = anchors.classes.concat();
    rows.extend_from_slice(&anchors.null);
    let t = Tensor::new(rows, &[labels.len(), anchors.embed_dim])?;
    std::fs::write(path, embeddings_csv(&labels, &t)).map_err(|e| ClastError::io(path, e))
}
