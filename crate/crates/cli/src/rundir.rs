use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const LOCK_FILE: &str = ".lock";

/// Record of what each stage produced.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Hash of the configuration used by the most recent stage.
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Relative path to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Exclusive handle on a run directory, released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(format!("creating {}", root.display()), e))?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&lock).unwrap_or_default().trim().to_string();
                return Err(CliError::Locked {
                    path: root.to_path_buf(),
                    holder,
                });
            }
            Err(e) => return Err(CliError::io(format!("creating {}", lock.display()), e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of an upstream artifact, or the error naming the command that makes it.
    pub fn require(&self, rel: &str, command: &'static str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { path: p, command })
        }
    }

    pub fn create_parent(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.create_parent(rel)?;
        fs::write(&p, bytes).map_err(|e| CliError::io(format!("writing {}", p.display()), e))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(rel, text)
    }

    pub fn read_manifest(&self) -> CliResult<RunManifest> {
        let p = self.path(MANIFEST_FILE);
        if !p.exists() {
            return Ok(RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                ..RunManifest::default()
            });
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }

    /// Replaces the stage's entry with checksums of `artifacts` and records its wall-clock time.
    pub fn record_stage(&self, stage: &str, config_hash: &str, artifacts: &[String], seconds: f64) -> CliResult<RunManifest> {
        let mut manifest = self.read_manifest()?;
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.config_hash = config_hash.to_string();
        let mut record = StageRecord {
            config_hash: config_hash.to_string(),
            artifacts: BTreeMap::new(),
        };
        for rel in artifacts {
            record.artifacts.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        manifest.stages.insert(stage.to_string(), record);
        self.write_json(MANIFEST_FILE, &manifest)?;

        let tp = self.path(TIMINGS_FILE);
        let mut timings: BTreeMap<String, f64> = fs::read_to_string(&tp)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        timings.insert(stage.to_string(), seconds);
        self.write_json(TIMINGS_FILE, &timings)?;
        Ok(manifest)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
