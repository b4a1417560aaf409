//! Output directories whose `manifest.json` lists every written file with its digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct FileEntry {
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    inputs: &'a BTreeMap<String, serde_json::Value>,
    seeds: &'a [u64],
    files: &'a BTreeMap<String, FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct OutputDir {
    root: PathBuf,
    command: String,
    inputs: BTreeMap<String, serde_json::Value>,
    seeds: Vec<u64>,
    files: BTreeMap<String, FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: BTreeMap::new(),
            seeds: Vec::new(),
            files: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.inputs.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn seeds(&mut self, seeds: &[u64]) {
        self.seeds = seeds.to_vec();
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(name.to_string(), FileEntry { bytes: bytes.len(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let m = Manifest { command: &self.command, inputs: &self.inputs, seeds: &self.seeds, files: &self.files };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        let path = self.root.join("manifest.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
