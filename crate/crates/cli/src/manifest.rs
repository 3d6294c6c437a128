//! Run manifests: the echoed configuration and content hashes of every
//! input and output, with no timestamps so reruns compare equal.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use markerq::synth::sha256_hex;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Every regular file under `root`, as `/`-separated relative paths.
fn files_under(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let entry = entry.map_err(|e| CliError::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Hash of a file, or of all files below a directory (sorted relative
/// paths and their hashes).
pub fn hash_input(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    if path.is_file() {
        return hash_file(path);
    }
    let mut listing = String::new();
    for f in files_under(path)? {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        listing.push_str(&format!("{} {}\n", rel.to_string_lossy().replace('\\', "/"), hash_file(&f)?));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

pub fn write(out: &Path, command: &str, config: Value, inputs: &[&Path]) -> Result<(), CliError> {
    let mut ins = BTreeMap::new();
    for p in inputs {
        ins.insert(p.to_string_lossy().into_owned(), hash_input(p)?);
    }
    let mut outs = BTreeMap::new();
    for f in files_under(out)? {
        let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        if rel != RUN_MANIFEST {
            outs.insert(rel, hash_file(&f)?);
        }
    }
    let config_sha256 = sha256_hex(serde_json::to_string(&config)?.as_bytes());
    let m = RunManifest {
        tool: "markerq",
        version: env!("CARGO_PKG_VERSION"),
        command: command.into(),
        config,
        config_sha256,
        inputs: ins,
        outputs: outs,
    };
    let path = out.join(RUN_MANIFEST);
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(())
}
