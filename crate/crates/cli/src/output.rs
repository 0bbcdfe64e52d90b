use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use symclone_core::data::RunConfig;

/// Output directory that remembers every file written through it and finishes
/// with `manifest.json`.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path for `name` (relative), registered for the manifest.
    pub fn file(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        Ok(p)
    }

    pub fn register(&mut self, path: PathBuf) {
        if !self.files.contains(&path) {
            self.files.push(path);
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(name)?;
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write_text(name, &text)
    }

    pub fn write_config(&mut self, cfg: &RunConfig) -> Result<PathBuf> {
        self.write_text("config.toml", &cfg.to_toml_string())
    }

    pub fn finish(mut self, command: &str) -> Result<()> {
        let mut files = Vec::new();
        for p in &self.files {
            let bytes = fs::read(p).with_context(|| format!("cannot read back {}", p.display()))?;
            files.push(FileEntry {
                path: p.strip_prefix(&self.root).unwrap_or(p).display().to_string(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&Manifest { command, files })? + "\n";
        let path = self.root.join("manifest.json");
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        self.files.clear();
        Ok(())
    }
}
