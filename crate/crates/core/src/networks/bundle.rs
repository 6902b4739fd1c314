use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diffengine::Array;
use crate::error::{Error, Result};
use crate::obs::af1;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: Value,
    pub config_hash: String,
    pub entries: Vec<BundleEntry>,
}

/// Named arrays plus the configuration that produced their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub manifest: Manifest,
    pub arrays: BTreeMap<String, Array>,
}

fn config_hash(config: &Value) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

impl Bundle {
    pub fn new(kind: &str, config: Value, arrays: BTreeMap<String, Array>) -> Result<Bundle> {
        let entries = arrays
            .iter()
            .map(|(name, a)| BundleEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                file: format!("{name}.af1"),
            })
            .collect();
        Ok(Bundle {
            manifest: Manifest {
                kind: kind.into(),
                config_hash: config_hash(&config)?,
                config,
                entries,
            },
            arrays,
        })
    }

    /// The named array, checked against the expected shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Array> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("bundle lacks {name}")))?;
        if a.shape() != shape {
            return Err(Error::Format(format!(
                "{name}: shape {:?}, expected {shape:?}",
                a.shape()
            )));
        }
        Ok(a.clone())
    }
}

pub fn save_bundle(dir: &Path, b: &Bundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for e in &b.manifest.entries {
        af1::write_f64(&dir.join(&e.file), &b.arrays[&e.name], json!({ "name": e.name }))?;
    }
    af1::write_bytes(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&b.manifest)?)
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if config_hash(&manifest.config)? != manifest.config_hash {
        return Err(Error::Format("bundle config hash mismatch".into()));
    }
    let mut arrays = BTreeMap::new();
    for e in &manifest.entries {
        if e.file.contains('/') || e.file.contains("..") {
            return Err(Error::Format(format!("bundle entry path {:?}", e.file)));
        }
        let (a, _) = af1::read_f64(&dir.join(&e.file))?;
        if a.shape() != e.shape {
            return Err(Error::Format(format!("{}: shape {:?} vs manifest {:?}", e.name, a.shape(), e.shape)));
        }
        arrays.insert(e.name.clone(), a);
    }
    Ok(Bundle { manifest, arrays })
}
