//! Run manifest: every emitted file with its SHA-256, plus the inputs each
//! stage consumed and their hashes at the time it ran.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Relative path to hash of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Relative paths of every file written.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
    /// Relative path to hash of every file emitted by any stage.
    pub files: BTreeMap<String, String>,
}

/// A file whose current content no longer matches the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Staleness {
    /// An emitted file changed or vanished.
    Modified { path: String },
    /// A stage's input changed after the stage ran.
    InputChanged { stage: String, path: String },
}

impl std::fmt::Display for Staleness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Staleness::Modified { path } => write!(f, "{path} differs from its recorded hash"),
            Staleness::InputChanged { stage, path } => write!(f, "stage `{stage}` consumed an older {path}"),
        }
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

impl RunManifest {
    pub fn load_or_default(root: &Path) -> anyhow::Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, root: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Replaces the record of `stage`, dropping hashes of files it emitted
    /// before, and hashes its new outputs.
    pub fn record(&mut self, root: &Path, stage: &str, record: StageRecord) -> anyhow::Result<()> {
        if let Some(old) = self.stages.remove(stage) {
            for p in &old.outputs {
                self.files.remove(p);
            }
        }
        for p in &record.outputs {
            self.files.insert(p.clone(), sha256_file(&root.join(p))?);
        }
        self.stages.insert(stage.to_string(), record);
        Ok(())
    }

    /// Every recorded file or stage input whose content changed.
    pub fn stale(&self, root: &Path) -> Vec<Staleness> {
        let current = |p: &str| sha256_file(&root.join(p)).ok();
        let mut out = Vec::new();
        for (p, h) in &self.files {
            if current(p).as_deref() != Some(h.as_str()) {
                out.push(Staleness::Modified { path: p.clone() });
            }
        }
        for (stage, rec) in &self.stages {
            for (p, h) in &rec.inputs {
                if current(p).as_deref() != Some(h.as_str()) {
                    out.push(Staleness::InputChanged {
                        stage: stage.clone(),
                        path: p.clone(),
                    });
                }
            }
        }
        out
    }
}
