//! Versioned on-disk container for named tensors plus run metadata.
//!
//! Checkpoints are JSON. f64 values survive a JSON round trip exactly
//! (serde_json prints the shortest representation that parses back to the
//! same bits), so a save/load cycle is value-preserving. Non-finite values
//! are rejected at save time because JSON cannot carry them.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub meta: serde_json::Map<String, Value>,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            meta: serde_json::Map::new(),
            tensors: IndexMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing string metadata field {key}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Checkpoint(format!("missing integer metadata field {key}")))
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .shift_remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for (name, t) in &self.tensors {
            t.check_finite(name)?;
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {name} has inconsistent shape")));
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("cannot parse {}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {} (expected {})",
                ck.format_version, FORMAT_VERSION
            )));
        }
        for (name, t) in &ck.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {name} has inconsistent shape")));
            }
            t.check_finite(name)?;
        }
        Ok(ck)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
