//! Measures class separability of a generated dataset.
//!
//! Usage: cargo run --example calibrate_dataset -- [classes] [paintings] [contents] [size] [seed]

use clast::config::DatasetConfig;
use clast::dataset::{stack_images, style_descriptor, Dataset};

fn arg(i: usize, default: u64) -> u64 {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> clast::Result<()> {
    let cfg = DatasetConfig {
        classes: arg(1, 8) as usize,
        paintings_per_class: arg(2, 16) as usize,
        contents: arg(3, 32) as usize,
        image_size: arg(4, 64) as usize,
        seed: arg(5, 7),
        holdout: 1,
        ..DatasetConfig::default()
    };
    let t = std::time::Instant::now();
    let ds = Dataset::generate(&cfg)?;
    println!("generated in {:.2?}", t.elapsed());

    let (_, acc) = ds.correlation()?;
    println!("row-argmax accuracy: {acc:.4}");

    let labels = ds.painting_labels();
    let embs = ds.painting_embeddings()?;
    let dim = embs.shape()[1];
    let rows: Vec<&[f64]> = embs.data().chunks(dim).collect();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    println!("mean cosine same-class {:.4}, cross-class {:.4}", same / ns as f64, cross / nc as f64);

    let desc = style_descriptor(&stack_images(&ds.paintings)?, &ds.encoder().descriptor)?;
    let dd = desc.shape()[1];
    let c = ds.num_classes();
    let mut means = vec![vec![0.0; dd]; c];
    let mut counts = vec![0usize; c];
    for (row, &l) in desc.data().chunks(dd).zip(&labels) {
        means[l].iter_mut().zip(row).for_each(|(m, v)| *m += v);
        counts[l] += 1;
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let mut margin = f64::INFINITY;
    let mut distinct_hue = 0;
    let mut pairs = 0;
    for a in 0..c {
        for b in a + 1..c {
            let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            margin = margin.min(d);
            let argmax = |m: &[f64]| (6..dd - 4).max_by(|&i, &j| m[i].total_cmp(&m[j])).unwrap();
            pairs += 1;
            if argmax(&means[a]) != argmax(&means[b]) {
                distinct_hue += 1;
            }
        }
    }
    println!("min pairwise L2 between class-mean descriptors: {margin:.4}");
    println!("class pairs with distinct hue-histogram argmax: {distinct_hue}/{pairs}");
    Ok(())
}
