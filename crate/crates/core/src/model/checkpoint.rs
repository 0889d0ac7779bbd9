//! JSON checkpoints: a header plus named parameter tensors.

use std::path::Path;

use clast_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::fusion::FusionKind;
use super::layers::Module;
use crate::error::{ClastError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: FusionKind,
    pub channels: usize,
    pub state_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub cond_hidden: usize,
    pub manifest_hash: String,
    pub stage: u8,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn capture(header: CheckpointHeader, modules: &[(&str, &dyn Module)]) -> Self {
        let mut params = Vec::new();
        for (prefix, m) in modules {
            m.visit(prefix, &mut |name, t| {
                params.push(ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                })
            });
        }
        Self { header, params }
    }

    /// Overwrites every parameter of `m` under `prefix`; all must be present
    /// with matching shapes. Loaded tensors keep the module's gradient flags.
    pub fn restore(&self, prefix: &str, m: &mut dyn Module) -> Result<()> {
        let mut err = None;
        m.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.params.iter().find(|p| p.name == name) {
                Some(p) if p.shape == t.shape() => {
                    let flag = t.requires_grad();
                    *t = Tensor::new(p.data.clone(), &p.shape).expect("shape checked").requires_grad_(flag);
                }
                Some(p) => {
                    err = Some(ClastError::Shape(format!(
                        "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                        p.shape,
                        t.shape()
                    )))
                }
                None => err = Some(ClastError::Lookup(format!("checkpoint lacks parameter `{name}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| ClastError::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| ClastError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClastError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
