//! Content-addressed artifact store with lock files and run manifests.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const WORKSPACE_ENV: &str = "METAFORGE_WORKSPACE";

/// Short hex digest of any serializable key.
pub fn key_hash<T: Serialize>(key: &T) -> String {
    let bytes = serde_json::to_vec(key).expect("key serializes");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest over the relative paths and contents of every file under `path`.
pub fn tree_sha256(path: &Path) -> Result<String, CliError> {
    if path.is_file() {
        return file_sha256(path);
    }
    let mut files = Vec::new();
    collect(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(path.join(&rel)).map_err(|e| CliError::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Datasets,
    Models,
    Runs,
}

impl Kind {
    fn dir(self) -> &'static str {
        match self {
            Kind::Datasets => "datasets",
            Kind::Models => "models",
            Kind::Runs => "runs",
        }
    }
}

pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    /// The flag wins over the environment, which wins over the config.
    pub fn resolve(flag: Option<&Path>, config: &Path) -> Self {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(WORKSPACE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| config.to_path_buf());
        Self { root }
    }

    pub fn artifact(&self, kind: Kind, hash: &str) -> PathBuf {
        self.root.join(kind.dir()).join(hash)
    }

    /// Produce the artifact directory for `hash` unless it already exists.
    /// `build` writes into a staging directory that is renamed into place.
    pub fn produce<F>(&self, kind: Kind, hash: &str, build: F) -> Result<(PathBuf, bool), CliError>
    where
        F: FnOnce(&Path) -> Result<(), CliError>,
    {
        let target = self.artifact(kind, hash);
        let parent = target.parent().expect("artifact has a parent");
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        let _lock = Lock::acquire(&target.with_extension("lock"))?;
        if target.is_dir() {
            info!("reusing {}", target.display());
            return Ok((target, true));
        }
        let staging = target.with_extension("partial");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        if let Err(e) = build(&staging) {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        fs::rename(&staging, &target).map_err(|e| CliError::io(&target, e))?;
        Ok((target, false))
    }
}

/// Exclusive lock held while an artifact is produced; removed on drop.
pub struct Lock {
    path: PathBuf,
}

const LOCK_WAIT: Duration = Duration::from_secs(3600);

impl Lock {
    pub fn acquire(path: &Path) -> Result<Self, CliError> {
        let start = Instant::now();
        let mut warned = false;
        loop {
            match OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(Self { path: path.to_path_buf() });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_WAIT {
                        return Err(CliError::Runtime(format!("timed out waiting for lock {}", path.display())));
                    }
                    if !warned {
                        warn!("waiting for lock {}", path.display());
                        warned = true;
                    }
                    thread::sleep(Duration::from_millis(200));
                }
                Err(e) => return Err(CliError::io(path, e)),
            }
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self { path: path.display().to_string(), sha256: tree_sha256(path)? })
    }
}

/// Echo of one command invocation. Only `started_unix` and `wall_time_s`
/// vary between identical runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Which evaluator produced each reported number.
    pub oracles: Value,
    pub reused: bool,
    pub started_unix: u64,
    pub wall_time_s: f64,
}

pub struct Clock {
    start: Instant,
    unix: u64,
}

impl Clock {
    pub fn start() -> Self {
        Self { start: Instant::now(), unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0) }
    }

    pub fn unix(&self) -> u64 {
        self.unix
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_are_stable() {
        assert_eq!(key_hash(&("a", 1)), key_hash(&("a", 1)));
        assert_ne!(key_hash(&("a", 1)), key_hash(&("a", 2)));
        assert_eq!(key_hash(&1).len(), 16);
    }

    #[test]
    fn tree_hash_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "x").unwrap();
        let h = tree_sha256(dir.path()).unwrap();
        assert_eq!(tree_sha256(dir.path()).unwrap(), h);
        fs::write(dir.path().join("a.txt"), "y").unwrap();
        assert_ne!(tree_sha256(dir.path()).unwrap(), h);
    }

    #[test]
    fn produce_reuses_existing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace { root: dir.path().to_path_buf() };
        let (p, reused) = ws.produce(Kind::Datasets, "abc", |d| fs::write(d.join("f"), "1").map_err(|e| CliError::io(d, e))).unwrap();
        assert!(!reused && p.join("f").exists());
        let (_, reused) = ws.produce(Kind::Datasets, "abc", |_| panic!("must not rebuild")).unwrap();
        assert!(reused);
        assert!(!p.with_extension("lock").exists());
    }

    #[test]
    fn failed_builds_leave_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace { root: dir.path().to_path_buf() };
        assert!(ws.produce(Kind::Models, "x", |_| Err(CliError::Runtime("boom".into()))).is_err());
        assert!(!ws.artifact(Kind::Models, "x").exists());
        assert!(!ws.artifact(Kind::Models, "x").with_extension("partial").exists());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.lock");
        let held = Lock::acquire(&path).unwrap();
        assert!(OpenOptions::new().write(true).create_new(true).open(&path).is_err());
        drop(held);
        assert!(!path.exists());
    }
}
