//! Run manifests and content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const BUILD_ID: &str = env!("NELF_BUILD_ID");

/// SHA-256 of a file, or of a directory's sorted `(relative path, file hash)`
/// listing. A directory's own run manifest is left out.
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            if rel == Path::new(MANIFEST_NAME) {
                continue;
            }
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(hash_path(&path.join(&rel))?.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes =
            std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let p = entry.map_err(|e| CliError::Io(e.to_string()))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(
                p.strip_prefix(root)
                    .expect("walked below the root")
                    .to_path_buf(),
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub build: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_owned(),
            build: BUILD_ID.to_owned(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.inputs
            .insert(format!("{name}:{}", path.display()), hash_path(path)?);
        Ok(())
    }

    /// Hashes every file in `out` (except the manifest) and writes the
    /// manifest there.
    pub fn write(mut self, out: &Path) -> Result<(), CliError> {
        let mut files = Vec::new();
        collect_files(out, out, &mut files)?;
        files.sort();
        for rel in files {
            if rel != Path::new(MANIFEST_NAME) {
                self.outputs.insert(
                    rel.to_string_lossy().into_owned(),
                    hash_path(&out.join(&rel))?,
                );
            }
        }
        let mut text =
            serde_json::to_string_pretty(&self).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        let path = out.join(MANIFEST_NAME);
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
