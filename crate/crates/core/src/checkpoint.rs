//! Parameter checkpoints.
//!
//! A checkpoint is a single JSON document: an ordered list of
//! `(name, shape, values)` entries with row-major f64 values. JSON floats
//! are written in shortest round-trip form, so save/load is lossless at
//! 64-bit precision. The layout is documented in the README.

use crate::error::{Error, Result};
use crate::nn::{Affine, Mlp};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "invlab-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub entries: Vec<ParamEntry>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), entries: Vec::new() }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        });
    }

    pub fn push_mlp(&mut self, prefix: &str, mlp: &Mlp) {
        for (name, p) in mlp.param_names(prefix).into_iter().zip(mlp.params()) {
            self.push(name, p);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no entry named {name}")))?;
        if e.shape.iter().product::<usize>() != e.values.len() {
            return Err(Error::invalid(format!(
                "entry {name}: shape {:?} does not match {} values",
                e.shape,
                e.values.len()
            )));
        }
        Ok(Tensor::new(e.shape.clone(), e.values.clone()))
    }

    /// Reassemble the MLP stored under `prefix.layer<i>.{w,b}`.
    pub fn mlp(&self, prefix: &str) -> Result<Mlp> {
        let mut layers = Vec::new();
        for i in 0.. {
            let wname = format!("{prefix}.layer{i}.w");
            if self.get(&wname).is_none() {
                break;
            }
            let w = self.tensor(&wname)?;
            let b = self.tensor(&format!("{prefix}.layer{i}.b"))?;
            layers.push(Affine { w, b });
        }
        if layers.is_empty() {
            return Err(Error::invalid(format!("checkpoint has no MLP under prefix {prefix}")));
        }
        Mlp::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::CheckpointMissing { path: path.display().to_string() });
        }
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = rng_from(42);
        let mlp = Mlp::new(&[7, 5, 3], &mut rng).unwrap();
        let mut ckpt = Checkpoint::new();
        ckpt.push_mlp("phi", &mlp);
        // awkward values that stress float formatting
        ckpt.push("misc", &Tensor::vector(vec![0.1, 1.0 / 3.0, 1e-300, -2.5e17]));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        let back = loaded.mlp("phi").unwrap();
        assert_eq!(back.fingerprint(), mlp.fingerprint());
        assert_eq!(
            loaded.tensor("misc").unwrap().data(),
            &[0.1, 1.0 / 3.0, 1e-300, -2.5e17]
        );
    }

    #[test]
    fn missing_path_is_reported() {
        let err = Checkpoint::load("/nonexistent/ckpt.json").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt.json"));
    }
}
