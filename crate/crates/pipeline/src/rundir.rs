//! A run directory holds `config.toml`, `manifest.json` and every stage
//! output. The manifest maps each stage to a fingerprint of its inputs and
//! the digests of the files it wrote, which makes reruns no-ops.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Relative path → sha256 of the file contents.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).context("manifest is not valid JSON")?;
        if m.schema_version != MANIFEST_SCHEMA {
            bail!("unsupported manifest schema {} (expected {MANIFEST_SCHEMA})", m.schema_version);
        }
        for (stage, rec) in &m.stages {
            for path in rec.outputs.keys() {
                check_relative(path).with_context(|| format!("stage {stage}"))?;
            }
        }
        Ok(m)
    }
}

/// Rejects paths that would escape the run directory.
pub fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    if path.is_empty() || p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        bail!("output path `{path}` must be relative and stay inside the run directory");
    }
    Ok(())
}

/// Files written by one stage execution.
#[derive(Debug, Default)]
pub struct Outputs {
    paths: Vec<String>,
}

impl Outputs {
    pub fn push(&mut self, rel: impl Into<String>) {
        self.paths.push(rel.into());
    }
}

pub struct RunDir {
    root: PathBuf,
    pub cfg: RunConfig,
    manifest: Manifest,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

impl RunDir {
    /// Opens `root`, writing `cfg` as its config. An existing manifest is
    /// kept so that stages whose inputs did not change stay complete.
    pub fn create(root: &Path, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.exists() {
            Manifest::from_json(&fs::read_to_string(&manifest_path)?)?
        } else {
            Manifest { schema_version: MANIFEST_SCHEMA, config_hash: String::new(), seed: cfg.seed, stages: BTreeMap::new() }
        };
        manifest.config_hash = cfg.hash();
        manifest.seed = cfg.seed;
        let run = Self { root: root.to_path_buf(), cfg, manifest };
        write_atomic(&run.root.join(CONFIG_FILE), run.cfg.to_toml()?.as_bytes())?;
        run.save_manifest()?;
        Ok(run)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let cfg = RunConfig::load(&root.join(CONFIG_FILE)).with_context(|| format!("no usable run at {}", root.display()))?;
        Self::create(root, cfg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn record(&self, stage: &str) -> Option<&StageRecord> {
        self.manifest.stages.get(stage)
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Writes a file under the run directory and remembers it as an output.
    pub fn write(&self, out: &mut Outputs, rel: &str, bytes: &[u8]) -> Result<()> {
        check_relative(rel)?;
        write_atomic(&self.path(rel), bytes)?;
        out.push(rel);
        Ok(())
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let p = self.path(rel);
        fs::read(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn read_string(&self, rel: &str) -> Result<String> {
        String::from_utf8(self.read(rel)?).with_context(|| format!("{rel} is not UTF-8"))
    }

    /// True when the stage completed with this fingerprint and all of its
    /// outputs are still present and unmodified.
    pub fn is_fresh(&self, stage: &str, fingerprint: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else { return false };
        rec.fingerprint == fingerprint
            && rec.outputs.iter().all(|(rel, hash)| fs::read(self.path(rel)).map(|b| sha256_hex(&b) == *hash).unwrap_or(false))
    }

    /// Removes the files a previous execution of `stage` produced.
    pub fn clear_stage(&mut self, stage: &str) -> Result<()> {
        if let Some(rec) = self.manifest.stages.remove(stage) {
            for rel in rec.outputs.keys() {
                let p = self.path(rel);
                if p.exists() {
                    fs::remove_file(&p).with_context(|| format!("removing stale {}", p.display()))?;
                }
            }
            self.save_manifest()?;
        }
        Ok(())
    }

    pub fn complete(&mut self, stage: &str, fingerprint: String, out: Outputs, summary: serde_json::Value) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for rel in out.paths {
            let hash = sha256_hex(&self.read(&rel)?);
            outputs.insert(rel, hash);
        }
        self.manifest.stages.insert(stage.to_string(), StageRecord { fingerprint, outputs, summary });
        self.save_manifest()
    }
}
