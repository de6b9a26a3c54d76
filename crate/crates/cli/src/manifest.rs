use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use polarbev::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// Record of one CLI run, written as `manifest.json` next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// SHA-256 over the relative path and bytes of every input file, in
    /// sorted path order.
    pub input_hash: String,
    pub output_dir: PathBuf,
    /// Wall time per stage, seconds.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            config_path: None,
            seed: None,
            input_hash: hash_inputs(&[]).expect("hashing nothing cannot fail"),
            output_dir: output_dir.to_path_buf(),
            timings: BTreeMap::new(),
        }
    }

    pub fn write(&self) -> Result<()> {
        write_json(&self.output_dir.join("manifest.json"), self)
    }
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::Io { path: path.into(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            // a previous run's manifest is an output, not an input
            .filter(|p| p.file_name().is_none_or(|n| n != "manifest.json"))
            .collect();
        entries.sort();
        for e in entries {
            collect(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Content hash of files and directory trees.
pub fn hash_inputs(roots: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for root in roots {
        let mut files = Vec::new();
        collect(root, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            let bytes = std::fs::read(&f).map_err(|e| Error::Io { path: f.clone(), source: e })?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::Io { path: path.into(), source: e })
}
