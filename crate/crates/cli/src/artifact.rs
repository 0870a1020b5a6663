//! Artifact directories: atomic writes, checksums, manifests and the run
//! lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".gpla.lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let mut f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Runs `save` against a temporary sibling of `path`, then renames it into
/// place.
pub fn save_atomic(path: &Path, save: impl FnOnce(&Path) -> gpla_core::Result<()>) -> Result<()> {
    let tmp = tmp_path(path);
    save(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Upstream {
    pub stage: String,
    pub config_hash: String,
    pub manifest_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    /// Hash of every configuration section this stage and its upstream
    /// stages read.
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub upstream: Vec<Upstream>,
    /// Relative path → SHA-256 of each artifact in the directory.
    pub artifacts: Vec<(String, String)>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", path.display()))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            bail!(
                "{}: manifest format_version {} unsupported (expected {MANIFEST_FORMAT_VERSION})",
                path.display(),
                m.format_version
            );
        }
        Ok(m)
    }

    /// Re-hashes every listed artifact and fails on any mismatch.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (rel, want) in &self.artifacts {
            let got = file_sha256(&dir.join(rel))?;
            if &got != want {
                bail!(
                    "artifact {} was modified after the `{}` stage wrote it; rerun that stage",
                    dir.join(rel).display(),
                    self.stage
                );
            }
        }
        Ok(())
    }
}

/// Collects what a stage produces and writes its manifest last.
pub struct ManifestBuilder {
    dir: PathBuf,
    stage: String,
    config_hash: String,
    seed: u64,
    started: SystemTime,
    upstream: Vec<Upstream>,
}

impl ManifestBuilder {
    pub fn new(
        dir: &Path,
        stage: &str,
        config_hash: String,
        seed: u64,
        upstream: Vec<Upstream>,
    ) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        // an interrupted rerun must not leave the old manifest vouching for new files
        let old = dir.join(MANIFEST_FILE);
        if old.exists() {
            fs::remove_file(&old)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            stage: stage.into(),
            config_hash,
            seed,
            started: SystemTime::now(),
            upstream,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Checksums every regular file under the directory (except the
    /// manifest) and writes the manifest atomically.
    pub fn finish(self) -> Result<Manifest> {
        let mut files = Vec::new();
        collect_files(&self.dir, &self.dir, &mut files)?;
        files.sort();
        let artifacts = files
            .into_iter()
            .filter(|rel| rel != MANIFEST_FILE && !rel.ends_with(".tmp"))
            .map(|rel| Ok((rel.clone(), file_sha256(&self.dir.join(&rel))?)))
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            stage: self.stage,
            config_hash: self.config_hash,
            seed: self.seed,
            started_unix: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: self
                .started
                .elapsed()
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            upstream: self.upstream,
            artifacts,
        };
        write_atomic(
            &self.dir.join(MANIFEST_FILE),
            &serde_json::to_vec_pretty(&m)?,
        )?;
        Ok(m)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked from root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Exclusive lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (lock file {}); remove it if that run is gone",
                run_dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let b = ManifestBuilder::new(dir.path(), "gen", "abc".into(), 3, vec![]).unwrap();
        write_atomic(&dir.path().join("a.txt"), b"hello").unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        write_atomic(&dir.path().join("sub/b.txt"), b"world").unwrap();
        let m = b.finish().unwrap();
        assert_eq!(m.artifacts.len(), 2);
        assert_eq!(m.artifacts[0].1, sha256_hex(b"hello"));
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        loaded.verify(dir.path()).unwrap();
        fs::write(dir.path().join("a.txt"), b"hellO").unwrap();
        assert!(loaded
            .verify(dir.path())
            .unwrap_err()
            .to_string()
            .contains("gen"));
    }

    #[test]
    fn sha256_known_answer() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }
}
