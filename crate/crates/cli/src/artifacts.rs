//! Artifact directory with a JSON index. Every stage entry records the hash
//! of the configuration that produced it, the hashes of its upstream stages
//! and the hash of every file it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub config_hash: String,
    /// Upstream stage name → its artifact hash.
    pub upstream: BTreeMap<String, String>,
    /// Path relative to the store root → file hash.
    pub files: BTreeMap<String, String>,
    /// Hash over the config hash, upstream hashes and file hashes.
    pub hash: String,
}

impl ArtifactRecord {
    fn compute_hash(config_hash: &str, upstream: &BTreeMap<String, String>, files: &BTreeMap<String, String>) -> String {
        let mut h = Sha256::new();
        h.update(config_hash);
        for (k, v) in upstream.iter().chain(files) {
            h.update(format!("\n{k}={v}"));
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug)]
pub struct ArtifactStore {
    pub root: PathBuf,
    index: BTreeMap<String, ArtifactRecord>,
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let index_path = root.join(INDEX_FILE);
        let index = if index_path.exists() {
            serde_json::from_str(&fs::read_to_string(&index_path)?).context("artifact index")?
        } else {
            BTreeMap::new()
        };
        Ok(Self { root, index })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn get(&self, stage: &str) -> Option<&ArtifactRecord> {
        self.index.get(stage)
    }

    pub fn records(&self) -> impl Iterator<Item = &ArtifactRecord> {
        self.index.values()
    }

    /// The stage's record when its inputs are unchanged and every file on
    /// disk still has the recorded hash.
    pub fn cached(&self, stage: &str, config_hash: &str, upstream: &BTreeMap<String, String>) -> Option<&ArtifactRecord> {
        let rec = self.index.get(stage)?;
        if rec.config_hash != config_hash || &rec.upstream != upstream {
            return None;
        }
        let intact = rec
            .files
            .iter()
            .all(|(rel, h)| file_hash(self.root.join(rel)).is_ok_and(|actual| &actual == h));
        intact.then_some(rec)
    }

    /// Hashes every file under the stage directory and records the stage.
    pub fn commit(&mut self, stage: &str, config_hash: &str, upstream: BTreeMap<String, String>) -> Result<ArtifactRecord> {
        let dir = self.stage_dir(stage);
        let mut files = BTreeMap::new();
        for path in walk(&dir)? {
            let rel = path.strip_prefix(&self.root).expect("under root").to_string_lossy().replace('\\', "/");
            files.insert(rel, file_hash(&path)?);
        }
        let rec = ArtifactRecord {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            hash: ArtifactRecord::compute_hash(config_hash, &upstream, &files),
            upstream,
            files,
        };
        self.index.insert(stage.to_string(), rec.clone());
        self.save_index()?;
        Ok(rec)
    }

    /// Drops a stage's record and output directory.
    pub fn invalidate(&mut self, stage: &str) -> Result<()> {
        self.index.remove(stage);
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        self.save_index()
    }

    fn save_index(&self) -> Result<()> {
        let tmp = self.root.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&self.index)?)?;
        fs::rename(tmp, self.root.join(INDEX_FILE))?;
        Ok(())
    }
}

/// Files below `dir`, sorted.
fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
