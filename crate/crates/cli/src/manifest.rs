//! Run manifests: what was asked, with which resolved config, and which
//! stages are already done.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use t2l_core::experiment::DeskConfig;

use crate::Command;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub status: Status,
    /// Stages finished so far, in order.
    pub stages: Vec<String>,
    /// Files written, relative to the manifest's directory where possible.
    pub outputs: Vec<String>,
    pub invocation: Command,
    pub config: Option<DeskConfig>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing manifest")?;
        let tmp = path.with_extension("toml.tmp");
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// A live run: the manifest on disk is rewritten after every stage.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    path: PathBuf,
    pub manifest: Manifest,
}

impl Run {
    /// Opens a run whose manifest lives at `path`. With `resume`, an
    /// existing manifest for the same invocation and config keeps its
    /// completed stages; a different one is an error.
    pub fn open(path: PathBuf, invocation: &Command, config: Option<&DeskConfig>, resume: bool) -> Result<Self> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let fresh = Manifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: invocation.name().into(),
            seed: config.map_or(0, |c| c.seed),
            status: Status::Running,
            stages: Vec::new(),
            outputs: Vec::new(),
            invocation: invocation.clone(),
            config: config.cloned(),
        };
        let manifest = if resume && path.exists() {
            let old = Manifest::load(&path)?;
            if old.invocation != fresh.invocation || old.config != fresh.config {
                bail!(
                    "cannot resume {}: it records a different invocation or config",
                    path.display()
                );
            }
            old
        } else {
            fresh
        };
        let run = Self { dir, path, manifest };
        run.manifest.save(&run.path)?;
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn done(&self, stage: &str) -> bool {
        self.manifest.stages.iter().any(|s| s == stage)
    }

    /// Marks `stage` finished and records its outputs.
    pub fn finish(&mut self, stage: &str, outputs: &[&Path]) -> Result<()> {
        for o in outputs {
            let rel = o.strip_prefix(&self.dir).unwrap_or(o).display().to_string();
            if !self.manifest.outputs.contains(&rel) {
                self.manifest.outputs.push(rel);
            }
        }
        self.manifest.stages.push(stage.into());
        self.manifest.save(&self.path)
    }

    /// Runs `f` unless `stage` is already done.
    pub fn stage(&mut self, stage: &str, f: impl FnOnce(&Path) -> Result<Vec<PathBuf>>) -> Result<()> {
        if self.done(stage) {
            return Ok(());
        }
        let outs = f(&self.dir).with_context(|| format!("stage {stage}"))?;
        let refs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
        self.finish(stage, &refs)
    }

    pub fn complete(mut self) -> Result<PathBuf> {
        self.manifest.status = Status::Complete;
        self.manifest.save(&self.path)?;
        Ok(self.path)
    }
}
