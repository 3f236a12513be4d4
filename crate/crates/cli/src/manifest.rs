//! Artifact writing and run manifests.
//!
//! A manifest `manifest_<subcommand>.json` records the effective config,
//! its SHA-256, the root seed, crate versions, input file hashes and the
//! hash of every artifact. Thread count and timings are left out so that
//! reruns produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, String)>,
    inputs: Vec<(String, String)>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), inputs: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let bytes = to_json_bytes(value)?;
        self.write(name, &bytes)
    }

    /// Register a file some library routine already wrote into the directory.
    pub fn adopt(&mut self, name: &str) -> Result<(), CliError> {
        let bytes = fs::read(self.dir.join(name))?;
        self.files.push((name.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Hash an input file; the path is recorded as given.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push((path.display().to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Write the manifest last so it can list every artifact.
    pub fn finish<C: Serialize>(mut self, subcommand: &str, seed: u64, config: &C) -> Result<(), CliError> {
        let config_value = serde_json::to_value(config)?;
        let config_hash = sha256_hex(&serde_json::to_vec(&config_value)?);
        self.files.sort();
        let manifest = json!({
            "format_version": MANIFEST_VERSION,
            "subcommand": subcommand,
            "seed": seed,
            "versions": {
                "stochbound": stochbound::VERSION,
                "stochbound-cli": env!("CARGO_PKG_VERSION"),
            },
            "config_hash": config_hash,
            "config": config_value,
            "inputs": self.inputs.iter().map(|(p, h)| json!({ "path": p, "sha256": h })).collect::<Vec<_>>(),
            "artifacts": self.files.iter().map(|(f, h)| json!({ "file": f, "sha256": h })).collect::<Vec<_>>(),
        });
        let name = format!("manifest_{}.json", subcommand.replace('-', "_"));
        fs::write(self.dir.join(name), to_json_bytes(&manifest)?)?;
        Ok(())
    }
}
