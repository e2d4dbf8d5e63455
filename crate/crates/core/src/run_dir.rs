//! Run directories: the artifacts of one pipeline plus a JSON manifest with
//! their content hashes and per-stage completion flags.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub complete: bool,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Every command line that wrote to this directory, oldest first.
    pub commands: Vec<Vec<String>>,
    pub stages: BTreeMap<String, StageEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Opens `path` for `cfg`, creating it if needed, and writes the resolved
    /// config next to the manifest. A directory created for a different
    /// config or seed is rejected unless `force`, which starts it over.
    pub fn open(
        path: &Path,
        cfg: &ExperimentConfig,
        command: &[String],
        force: bool,
    ) -> Result<Self> {
        fs::create_dir_all(path)?;
        let hash = cfg.hash_hex();
        let fresh = Manifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: hash.clone(),
            seed: cfg.seed,
            commands: Vec::new(),
            stages: BTreeMap::new(),
        };
        let mpath = path.join(MANIFEST);
        let mut manifest = if mpath.exists() {
            let old: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
            if old.config_hash == hash && old.seed == cfg.seed {
                old
            } else if force {
                fresh
            } else {
                return Err(Error::InvalidConfig(format!(
                    "{} belongs to config {} (seed {}); pass --force to start over",
                    path.display(),
                    &old.config_hash[..12],
                    old.seed
                )));
            }
        } else {
            fresh
        };
        if !command.is_empty() {
            manifest.commands.push(command.to_vec());
        }
        let dir = RunDir {
            path: path.to_path_buf(),
            manifest,
        };
        fs::write(dir.file(CONFIG_FILE), cfg.to_toml())?;
        dir.save()?;
        Ok(dir)
    }

    /// Opens an existing run directory read-only.
    pub fn open_existing(path: &Path) -> Result<Self> {
        let mpath = path.join(MANIFEST);
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath.display().to_string()));
        }
        Ok(RunDir {
            path: path.to_path_buf(),
            manifest: serde_json::from_str(&fs::read_to_string(&mpath)?)?,
        })
    }

    /// The config the directory was created with.
    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.file(CONFIG_FILE), &[])
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.manifest.stages.get(stage).is_some_and(|s| s.complete)
    }

    /// Marks `stage` as in progress. Fails on a completed stage unless
    /// `force`.
    pub fn begin(&mut self, stage: &str, force: bool) -> Result<()> {
        if self.is_complete(stage) && !force {
            return Err(Error::StageComplete(stage.to_string()));
        }
        self.manifest
            .stages
            .insert(stage.to_string(), StageEntry::default());
        self.save()
    }

    /// Hashes `files` and marks `stage` complete.
    pub fn complete(&mut self, stage: &str, files: &[&str]) -> Result<()> {
        let mut artifacts = Vec::with_capacity(files.len());
        for f in files {
            artifacts.push(Artifact {
                file: f.to_string(),
                sha256: sha256_file(&self.file(f))?,
            });
        }
        self.manifest.stages.insert(
            stage.to_string(),
            StageEntry {
                complete: true,
                artifacts,
            },
        );
        self.save()
    }

    /// Clears the completion flag of each stage.
    pub fn invalidate(&mut self, stages: &[&str]) -> Result<()> {
        for s in stages {
            self.manifest.stages.remove(*s);
        }
        self.save()
    }

    /// Checks the recorded hashes of a completed stage against the files.
    pub fn verify(&self, stage: &str) -> Result<()> {
        let entry = self
            .manifest
            .stages
            .get(stage)
            .filter(|s| s.complete)
            .ok_or_else(|| {
                Error::MissingArtifact(format!("stage `{stage}` in {}", self.path.display()))
            })?;
        for a in &entry.artifacts {
            let p = self.file(&a.file);
            if !p.exists() {
                return Err(Error::MissingArtifact(p.display().to_string()));
            }
            if sha256_file(&p)? != a.sha256 {
                return Err(Error::Format {
                    path: p,
                    reason: "content hash differs from the manifest".into(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let tmp = self.file(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        fs::rename(&tmp, self.file(MANIFEST))?;
        Ok(())
    }
}
