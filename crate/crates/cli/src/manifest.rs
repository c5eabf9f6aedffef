//! Run manifests: the resolved configuration, input digests and seed of a
//! run, written alongside every file output so the run can be replayed
//! bit-exactly.

use std::path::Path;

use epiflow::io::{read_key_values, write_key_values};
use sha2::{Digest, Sha256};

use crate::errors::CliError;

#[derive(Debug, Clone)]
pub struct Manifest {
    pub pairs: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        let pairs = vec![
            ("command".to_string(), command.to_string()),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("rng_seed".to_string(), seed.to_string()),
        ];
        Manifest { pairs }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.pairs.push((format!("arg.{key}"), value.to_string()));
    }

    pub fn config(&mut self, pairs: &[(String, String)]) {
        for (k, v) in pairs {
            self.pairs.push((format!("config.{k}"), v.clone()));
        }
    }

    /// Record the SHA-256 digest of an input file.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.pairs.push((format!("input.{name}.sha256"), hex));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_key_values(path, &self.pairs)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest, CliError> {
        Ok(Manifest { pairs: read_key_values(path)? })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::input(format!("manifest missing key '{key}'")))
    }

    /// All `arg.` entries with the prefix stripped, in manifest order.
    pub fn args(&self) -> Vec<(String, String)> {
        self.with_prefix("arg.")
    }

    /// All `config.` entries with the prefix stripped, in manifest order.
    pub fn config_pairs(&self) -> Vec<(String, String)> {
        self.with_prefix("config.")
    }

    fn with_prefix(&self, prefix: &str) -> Vec<(String, String)> {
        self.pairs
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}
