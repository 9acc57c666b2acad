//! Provenance sidecars. Every output file `x` gets `x.prov.json` recording
//! a hash of the parameters that produced it (paths excluded, input file
//! contents included), the seed and the artifact version.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact: String,
    pub format: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Hash of a serializable parameter set; serde field order makes it stable.
pub fn hash_params<T: Serialize>(params: &T) -> String {
    sha256_hex(&serde_json::to_vec(params).expect("parameters serialize"))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".prov.json");
    path.with_file_name(name)
}

/// What a command stamps onto each of its outputs.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub command: &'static str,
    pub seed: u64,
    pub config_hash: String,
}

impl Stamp {
    pub fn new<T: Serialize>(command: &'static str, seed: u64, params: &T) -> Self {
        Self { command, seed, config_hash: hash_params(params) }
    }

    /// Writes `bytes` to `path` together with its provenance sidecar.
    pub fn write(&self, path: &Path, format: &str, bytes: &[u8]) -> CliResult<()> {
        write_bytes(path, bytes)?;
        let prov = Provenance {
            artifact: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            format: format.to_string(),
            command: self.command.to_string(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            version: VERSION.to_string(),
        };
        let side = sidecar_path(path);
        write_bytes(&side, serde_json::to_string_pretty(&prov).expect("provenance serializes").as_bytes())
    }

    /// Adds a sidecar for a file some other writer already produced.
    pub fn attach(&self, path: &Path, format: &str) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.write(path, format, &bytes)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_sits_next_to_the_artifact() {
        assert_eq!(sidecar_path(Path::new("a/b/metrics.json")), PathBuf::from("a/b/metrics.json.prov.json"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct P {
            a: u32,
            b: f64,
        }
        let h1 = hash_params(&P { a: 1, b: 0.5 });
        assert_eq!(h1, hash_params(&P { a: 1, b: 0.5 }));
        assert_ne!(h1, hash_params(&P { a: 2, b: 0.5 }));
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn stamp_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.csv");
        Stamp::new("test", 9, &1u8).write(&path, "csv", b"a,b\n").unwrap();
        let prov: Provenance =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(prov.seed, 9);
        assert_eq!(prov.artifact, "x.csv");
        assert_eq!(prov.version, VERSION);
    }
}
