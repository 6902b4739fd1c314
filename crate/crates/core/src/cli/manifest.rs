use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
}

/// Files read from one input location.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub path: PathBuf,
    pub files: Vec<FileHash>,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub task: Option<String>,
    pub w: Option<usize>,
    pub config_sha256: String,
    /// Path arguments as given, keyed by role (`input`, `model`, `analysis`).
    pub args: BTreeMap<String, PathBuf>,
    /// Hashes of the files each role actually contributed.
    pub inputs: BTreeMap<String, InputRecord>,
    pub outputs: Vec<FileHash>,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Every regular file under `dir`, as sorted `/`-separated relative names.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Hashes of `names` under `dir`; missing optional files are skipped.
pub fn hash_inputs(dir: &Path, names: &[&str]) -> Result<InputRecord> {
    let mut files = Vec::new();
    for n in names {
        let p = dir.join(n);
        if p.is_file() {
            files.push(FileHash {
                name: n.to_string(),
                sha256: hash_file(&p)?,
            });
        }
    }
    Ok(InputRecord {
        path: dir.to_path_buf(),
        files,
    })
}

/// Hashes of every file under `dir`.
pub fn hash_tree(dir: &Path) -> Result<InputRecord> {
    let names = list_files(dir)?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    hash_inputs(dir, &refs)
}

/// Hashes of every output in `dir` except the manifest itself.
pub fn hash_outputs(dir: &Path) -> Result<Vec<FileHash>> {
    list_files(dir)?
        .into_iter()
        .filter(|n| n != MANIFEST_FILE)
        .map(|n| {
            let sha256 = hash_file(&dir.join(&n))?;
            Ok(FileHash { name: n, sha256 })
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let p = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Checks that recorded inputs still hash the same.
pub fn verify_inputs(m: &BundleManifest) -> Result<()> {
    for (role, rec) in &m.inputs {
        for f in &rec.files {
            let now = hash_file(&rec.path.join(&f.name))?;
            if now != f.sha256 {
                return Err(Error::Format(format!(
                    "{role} file {} changed since the bundle was made",
                    rec.path.join(&f.name).display()
                )));
            }
        }
    }
    Ok(())
}
