//! Run manifests and the content hash behind them.
//!
//! Files hash as the hex SHA-256 of their bytes. A directory hashes as the
//! SHA-256 of its sorted `relative/path\t<file hash>\n` lines, so renaming,
//! adding or editing any file changes it. Manifests carry no timestamps or
//! absolute paths, which keeps reruns byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::AnalysisConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_DIR: &str = "manifests";
const FORMAT: u32 = 1;

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hash_bytes(&bytes))
}

/// Files under `dir`, relative and sorted, using `/` separators.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
            let path = entry.map_err(|e| CliError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
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

pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for rel in list_files(dir)? {
        h.update(format!("{rel}\t{}\n", hash_file(&dir.join(&rel))?));
    }
    Ok(hex(&h.finalize()))
}

pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        hash_dir(path)
    } else {
        hash_file(path)
    }
}

/// The configuration with paths removed, as recorded in manifests.
pub fn portable_config(cfg: &AnalysisConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serialises");
    v.as_object_mut().expect("config is a table").remove("paths");
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub stage: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Logical input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output directory, to content hash.
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific run facts (chosen K, exclusion counts, ...).
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &AnalysisConfig) -> Self {
        let config = portable_config(cfg);
        let config_hash = hash_bytes(config.to_string().as_bytes());
        Manifest {
            format: FORMAT,
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn path(out_dir: &Path, stage: &str) -> PathBuf {
        out_dir.join(MANIFEST_DIR).join(format!("{stage}.json"))
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, out_dir: &Path, rel: &str) -> Result<()> {
        self.outputs.insert(rel.to_string(), hash_file(&out_dir.join(rel))?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.notes
            .insert(key.to_string(), serde_json::to_value(value).expect("note serialises"));
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = Self::path(out_dir, &self.stage);
        let dir = path.parent().expect("manifest path has a parent");
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    pub fn read(out_dir: &Path, stage: &str) -> Result<Option<Self>> {
        let path = Self::path(out_dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// True when a previous run saw the same inputs and configuration and
    /// every output it recorded is still unchanged on disk.
    pub fn is_fresh(&self, out_dir: &Path) -> bool {
        let Ok(Some(old)) = Self::read(out_dir, &self.stage) else {
            return false;
        };
        old.version == self.version
            && old.config_hash == self.config_hash
            && old.inputs == self.inputs
            && !old.outputs.is_empty()
            && old
                .outputs
                .iter()
                .all(|(rel, h)| hash_file(&out_dir.join(rel)).is_ok_and(|now| &now == h))
    }
}

/// Hash identifying the whole run: the SHA-256 of every stage manifest in
/// stage-name order, each prefixed by its name.
pub fn run_hash(out_dir: &Path) -> Result<String> {
    let dir = out_dir.join(MANIFEST_DIR);
    let mut h = Sha256::new();
    if dir.is_dir() {
        for rel in list_files(&dir)? {
            let bytes = fs::read(dir.join(&rel)).map_err(|e| CliError::io(dir.join(&rel), e))?;
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(&bytes);
        }
    }
    Ok(hex(&h.finalize()))
}
