use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Output;

/// Record of one run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub inputs: BTreeMap<String, String>,
    pub options: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_clock_seconds: f64,
    /// SHA-256 of the primary JSON output bytes.
    pub result_sha256: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, out: &Output, seconds: f64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            inputs: out
                .inputs
                .iter()
                .map(|(k, p)| (k.to_string(), p.display().to_string()))
                .collect(),
            options: out.options.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            seed: out.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: seconds,
            result_sha256: hex::encode(Sha256::digest(out.json.as_bytes())),
        }
    }

    pub fn to_json(&self) -> String {
        minmax_cert::json::to_string(self)
    }
}

/// `result.json` -> `result.json.manifest.json`.
pub fn sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(Path::new("out/r.json")), PathBuf::from("out/r.json.manifest.json"));
        assert_eq!(sibling(Path::new("model")), PathBuf::from("model.manifest.json"));
    }
}
