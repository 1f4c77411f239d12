//! Run manifest: what a command was asked to do, what it read and wrote,
//! and a summary of its results.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use planemeta::ingest::read_manifest;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::FileConfig;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: u64,
    pub config: FileConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_secs: f64,
    pub metrics: serde_json::Value,
}

fn feed(h: &mut Sha256, name: &str, bytes: &[u8]) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

/// Regular files under `dir`, recursively, in sorted order.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(walk_files(&p)?);
        } else if p.is_file() {
            out.push(p);
        }
    }
    Ok(out)
}

/// Content hash of a file, or of every file under a directory keyed by relative path.
pub fn digest_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        for f in walk_files(path)? {
            let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            feed(
                &mut h,
                &rel,
                &fs::read(&f).with_context(|| format!("reading {}", f.display()))?,
            );
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Hash of a slice manifest together with every file it lists, in manifest order.
pub fn digest_dataset(manifest: &Path) -> Result<String> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    feed(
        &mut h,
        "manifest",
        &fs::read(manifest).with_context(|| format!("reading {}", manifest.display()))?,
    );
    for row in read_manifest(manifest)? {
        let p = row.resolve(base);
        let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        feed(&mut h, &row.path.to_string_lossy(), &bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl FileDigest {
    pub fn of_path(role: &str, path: &Path) -> Result<Self> {
        Ok(FileDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: digest_path(path)?,
        })
    }

    pub fn of_dataset(role: &str, manifest: &Path) -> Result<Self> {
        Ok(FileDigest {
            role: role.to_string(),
            path: manifest.display().to_string(),
            sha256: digest_dataset(manifest)?,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_tracks_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a"), b"x").unwrap();
        fs::write(dir.path().join("sub/b"), b"y").unwrap();
        let first = digest_path(dir.path()).unwrap();
        assert_eq!(first, digest_path(dir.path()).unwrap());
        fs::write(dir.path().join("sub/b"), b"z").unwrap();
        let changed = digest_path(dir.path()).unwrap();
        assert_ne!(first, changed);
        fs::rename(dir.path().join("a"), dir.path().join("c")).unwrap();
        assert_ne!(changed, digest_path(dir.path()).unwrap());
    }
}
