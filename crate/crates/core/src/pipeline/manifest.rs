//! Run manifest (config hash, seeds, output checksums) and the per-run
//! directory lock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".ctxprobe.lock";
pub const FAILED_DIR: &str = "failed";

/// Hex sha256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Records what a completed run produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<String>,
    /// Relative path -> sha256, sorted.
    pub outputs: BTreeMap<String, String>,
}

/// Walks `out_dir` and checksums every artifact (excluding the manifest,
/// the lock, and the failure marker).
pub fn collect_outputs(out_dir: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut outputs = BTreeMap::new();
    let mut stack = vec![out_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(PipelineError::Io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(PipelineError::Io)?;
        entries.sort();
        for path in entries {
            let rel = path
                .strip_prefix(out_dir)
                .expect("entry under out_dir")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST_FILE || rel == LOCK_FILE || rel.starts_with(FAILED_DIR) {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(PipelineError::Io)?;
                outputs.insert(rel, sha256_hex(&bytes));
            }
        }
    }
    Ok(outputs)
}

pub fn write_manifest(manifest: &Manifest, out_dir: &Path) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(out_dir.join(MANIFEST_FILE), bytes).map_err(PipelineError::Io)?;
    Ok(())
}

pub fn read_manifest(out_dir: &Path) -> Result<Manifest, PipelineError> {
    let bytes = fs::read(out_dir.join(MANIFEST_FILE)).map_err(PipelineError::Io)?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::InvalidConfig(e.to_string()))
}

/// Exclusive lock on an output directory; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(out_dir).map_err(PipelineError::Io)?;
        let path = out_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path))
            }
            Err(e) => Err(PipelineError::Io(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Marks a failed stage so partial outputs are recognizable.
pub fn mark_failed(out_dir: &Path, stage: &str) {
    let dir = out_dir.join(FAILED_DIR);
    if fs::create_dir_all(&dir).is_ok() {
        let _ = fs::write(dir.join("stage"), format!("{stage}\n"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            RunLock::acquire(dir.path()),
            Err(PipelineError::Locked(_))
        ));
        drop(lock);
        let again = RunLock::acquire(dir.path()).unwrap();
        drop(again);
    }

    #[test]
    fn outputs_exclude_bookkeeping_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("results")).unwrap();
        fs::write(dir.path().join("results/a.csv"), b"x").unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{}").unwrap();
        fs::write(dir.path().join(LOCK_FILE), b"").unwrap();
        let outputs = collect_outputs(dir.path()).unwrap();
        assert_eq!(outputs.len(), 1);
        assert!(outputs.contains_key("results/a.csv"));
    }
}
