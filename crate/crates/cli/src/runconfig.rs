use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const FILE_NAME: &str = "run_config.json";

/// Fallback when `--seed` is omitted outside `--strict` mode.
pub const DEFAULT_SEED: u64 = 7;

/// The resolved parameters of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunConfig<P: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub params: P,
    pub seeds: BTreeMap<String, SeedRecord>,
    pub home: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct SeedRecord {
    pub value: u64,
    /// `flag` or `default`.
    pub source: &'static str,
}

impl<P: Serialize> RunConfig<P> {
    pub fn new(command: &'static str, params: P, home: &Path) -> Self {
        RunConfig {
            tool: "stegozoo",
            version: env!("CARGO_PKG_VERSION"),
            command,
            params,
            seeds: BTreeMap::new(),
            home: home.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(FILE_NAME);
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Resolves an optional seed flag against `--strict`.
pub fn resolve_seed(name: &'static str, flag: Option<u64>, strict: bool) -> Result<(u64, SeedRecord), CliError> {
    match flag {
        Some(v) => Ok((v, SeedRecord { value: v, source: "flag" })),
        None if strict => Err(CliError::Config(format!("--{name} is required in --strict mode"))),
        None => Ok((DEFAULT_SEED, SeedRecord { value: DEFAULT_SEED, source: "default" })),
    }
}

/// Reads one field of a previous run's config, if present.
pub fn read_field(dir: &Path, pointer: &str) -> Option<serde_json::Value> {
    let text = std::fs::read_to_string(dir.join(FILE_NAME)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.pointer(pointer).cloned()
}
