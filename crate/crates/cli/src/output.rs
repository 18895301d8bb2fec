//! Output directory bookkeeping: every file written is recorded for the
//! manifest and removed again if the run fails.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    mode: &'a str,
    seed: u64,
    config_digest: &'a str,
    timestamp: u64,
    files: &'a [FileEntry],
}

pub struct OutputDir {
    root: PathBuf,
    created_root: bool,
    files: Vec<FileEntry>,
    finished: bool,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<OutputDir> {
        let created_root = !root.exists();
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(OutputDir { root: root.to_path_buf(), created_root, files: Vec::new(), finished: false })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        // recorded before writing so a partial file is still cleaned up
        self.files.push(FileEntry { path: name.to_string(), bytes: bytes.len(), sha256: hex_digest(bytes) });
        let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Write the manifest last; it lists every file written before it.
    pub fn finish(mut self, mode: &str, seed: u64, config_digest: &str) -> Result<PathBuf> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            mode,
            seed,
            config_digest,
            timestamp,
            files: &self.files,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.finished = true;
        Ok(self.root.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.finished {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(self.root.join(&f.path));
        }
        if self.created_root {
            let _ = fs::remove_dir(&self.root);
        }
    }
}
