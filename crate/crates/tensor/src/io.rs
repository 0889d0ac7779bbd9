//! Debug dump of tensors as CSV.
//!
//! The first line is `# shape: d0,d1,...`; each following row holds one slice
//! of the last axis in row-major order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::tensor::Tensor;

pub fn to_csv(t: &Tensor) -> String {
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let mut s = format!("# shape: {}\n", shape.join(","));
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    for row in t.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn write_csv(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(t))?;
    Ok(())
}
