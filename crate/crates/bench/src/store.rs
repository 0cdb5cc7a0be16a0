//! Run-directory layout and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gda_core::container::{read_container, write_container, Record};

use crate::error::{BenchError, Result};

/// Paths of every artifact under a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.toml")
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn audit(&self, name: &str) -> PathBuf {
        self.root.join("audit").join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn result(&self, name: &str) -> PathBuf {
        self.root.join("results").join(name)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, records)?;
    write_atomic(path, &buf)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| BenchError::MissingArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = read_bytes(path)?;
    read_container(bytes.as_slice()).map_err(|e| BenchError::MissingArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_records(&dir.path().join("nope.gdac")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
