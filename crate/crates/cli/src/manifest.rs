//! Per-directory manifests: config hash, seed, versions and file digests.

use std::collections::BTreeMap;
use std::path::Path;

use delayprop_core::error::{Error, Result};
use delayprop_core::model::CHECKPOINT_FORMAT;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    config_hash: String,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    /// Relative path → SHA-256 of every artifact in the directory.
    files: BTreeMap<String, String>,
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if entry.file_name() != MANIFEST {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let rel = path
                .strip_prefix(root)
                .expect("inside root")
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(())
}

/// Write `manifest.json` describing everything currently under `dir`.
pub fn write_manifest(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files)?;
    let m = Manifest {
        stage,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: BTreeMap::from([
            ("delayprop", env!("CARGO_PKG_VERSION")),
            ("checkpoint_format", CHECKPOINT_FORMAT),
        ]),
        files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&m)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}
