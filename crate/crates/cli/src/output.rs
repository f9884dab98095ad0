//! Atomic file output, input discovery and the per-command run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::Utc;
use memgym_core::model::{read_versioned, to_versioned_json, FORMAT_VERSION};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::UsageError;

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    ensure_dir(dir)?;
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_versioned<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, &to_versioned_json(value))
}

pub fn read_doc<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    Ok(read_versioned(path)?)
}

/// Files in `dir` whose names end with `suffix`, sorted by name.
pub fn files_with_suffix(dir: &Path, suffix: &str) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(UsageError(format!("{} is not a directory", dir.display())).into());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(suffix))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Filesystem-safe form of an agent descriptor: `awe-(2,4,30)` becomes `awe-2-4-30`.
pub fn slug(descriptor: &str) -> String {
    let mut out = String::new();
    for c in descriptor.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            out.push(c);
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// Everything needed to rerun a command with scripted backends.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub backends: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
    pub tool_version: String,
    pub format_version: String,
}

impl RunManifest {
    pub fn start(command: &str, config: Value) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            backends: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: Utc::now().to_rfc3339(),
            finished_at: String::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: FORMAT_VERSION.to_string(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, dir: &Path) -> anyhow::Result<()> {
        self.finished_at = Utc::now().to_rfc3339();
        write_versioned(&dir.join("manifest.json"), &self)
    }
}
