//! Run manifests: every command that writes artifacts drops a
//! `manifest.json` beside them recording what produced the directory —
//! the exact argv, content hashes of the config and dataset involved,
//! the binary's source revision, and wall-clock bounds (left empty in
//! deterministic runs so re-runs stay byte-identical).

use chrono::{SecondsFormat, Utc};
use la_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FORMAT: &str = "la-run-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Source revision baked into the binary at build time.
pub fn binary_revision() -> &'static str {
    option_env!("LA_REVISION").unwrap_or("unknown")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub format: String,
    /// Exact argv of the producing invocation.
    pub command: Vec<String>,
    /// SHA-256 of the config artifact named by `config_file`; empty when
    /// the run had no config artifact.
    pub config_hash: String,
    /// Config artifact inside the run directory, when one was written.
    pub config_file: Option<String>,
    /// Content hash of the dataset index the run consumed or produced;
    /// empty when no dataset was involved.
    pub dataset_hash: String,
    /// Where that dataset lived at run time (as passed on the command line).
    pub dataset_path: Option<String>,
    /// Source revision of the binary, "unknown" outside a git checkout.
    pub revision: String,
    pub seed: u64,
    /// RFC 3339 UTC bounds of the run; empty strings in deterministic runs.
    pub started_at: String,
    pub finished_at: String,
    /// Artifact files inside the run directory, relative paths.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: Vec<String>) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            command,
            config_hash: String::new(),
            config_file: None,
            dataset_hash: String::new(),
            dataset_path: None,
            revision: binary_revision().into(),
            seed: 0,
            started_at: String::new(),
            finished_at: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(&path, json)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "{} has format '{}', this binary reads '{MANIFEST_FORMAT}'",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    /// Re-derive every hash that is still reachable and check the recorded
    /// outputs exist. Returns one human-readable line per verified item;
    /// any mismatch is an error.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut notes = Vec::new();
        for out in &self.outputs {
            let p = dir.join(out);
            if !p.exists() {
                return Err(Error::Format(format!(
                    "manifest lists output '{out}' but {} does not exist",
                    p.display()
                )));
            }
            let bytes = fs::metadata(&p).map(|m| m.len()).unwrap_or(0);
            notes.push(format!("output {out} ({bytes} bytes)"));
        }
        if let Some(cf) = &self.config_file {
            let p = dir.join(cf);
            let got = sha256_hex(&fs::read(&p)?);
            if got != self.config_hash {
                return Err(Error::Format(format!(
                    "config hash mismatch for {cf}: manifest {} vs recomputed {got}",
                    self.config_hash
                )));
            }
            notes.push(format!("config {cf} hash verified ({got})"));
        }
        if let Some(dp) = &self.dataset_path {
            let p = PathBuf::from(dp);
            if p.is_dir() {
                let got = la_core::data::DatasetIndex::load(&p)?.content_hash();
                if got != self.dataset_hash {
                    return Err(Error::Format(format!(
                        "dataset hash mismatch for {dp}: manifest {} vs recomputed {got}",
                        self.dataset_hash
                    )));
                }
                notes.push(format!("dataset {dp} hash verified ({got})"));
            } else {
                notes.push(format!("dataset {dp} not reachable from here, hash not rechecked"));
            }
        }
        Ok(notes)
    }
}
