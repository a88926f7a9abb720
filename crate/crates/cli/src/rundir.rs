use std::path::{Path, PathBuf};

use dfa_core::config::DfaConfig;
use dfa_core::{DfaError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    files: Vec<FileEntry>,
}

/// Output directory of one invocation. Produced files are registered and
/// listed, with digests, in `run_manifest.json` on `finish`.
pub struct RunDir {
    root: PathBuf,
    command: &'static str,
    files: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path, command: &'static str, cfg: &DfaConfig) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| DfaError::io(root, e))?;
        let mut run = RunDir {
            root: root.to_path_buf(),
            command,
            files: Vec::new(),
        };
        run.write(RESOLVED_CONFIG, cfg.to_toml_string()?.as_bytes())?;
        run.write(SEED_FILE, format!("{}\n", cfg.train.seed).as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.root.join(rel);
        std::fs::write(&p, bytes).map_err(|e| DfaError::io(&p, e))?;
        self.register(rel);
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(rel, text.as_bytes())
    }

    /// Records a file (or every file below a directory) written by other code.
    pub fn register(&mut self, rel: &str) {
        let p = PathBuf::from(rel);
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    pub fn finish(self, cfg: &DfaConfig) -> Result<()> {
        let mut listed = Vec::new();
        for rel in &self.files {
            collect(&self.root, rel, &mut listed)?;
        }
        listed.sort();
        listed.dedup();
        let mut files = Vec::with_capacity(listed.len());
        for rel in listed {
            let p = self.root.join(&rel);
            let bytes = std::fs::read(&p).map_err(|e| DfaError::io(&p, e))?;
            files.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = RunManifest {
            command: self.command,
            config_hash: cfg.hash()?,
            seed: cfg.train.seed,
            files,
        };
        let p = self.root.join(RUN_MANIFEST);
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| DfaError::io(&p, e))
    }
}

fn collect(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let p = root.join(rel);
    if p.is_dir() {
        let rd = std::fs::read_dir(&p).map_err(|e| DfaError::io(&p, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| DfaError::io(&p, e))?;
            collect(root, &rel.join(entry.file_name()), out)?;
        }
    } else if p.exists() {
        out.push(rel.to_path_buf());
    }
    Ok(())
}
