//! Flat TOML configuration files and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fail::{usage, CliResult};

/// A scalar or a list, for per-endmember values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn expand(&self, n: usize, what: &str) -> CliResult<Vec<f64>> {
        match self {
            OneOrMany::One(v) => Ok(vec![*v; n]),
            OneOrMany::Many(v) if v.len() == n => Ok(v.clone()),
            OneOrMany::Many(v) => Err(usage(format!("{what} has {} values, expected {n}", v.len()))),
        }
    }
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    /// Library CSV; when absent a library is synthesised.
    pub library: Option<PathBuf>,
    pub bands: Option<usize>,
    pub endmembers: Option<usize>,
    pub coherence: Option<f64>,
    pub beta: Option<OneOrMany>,
    pub s: Option<OneOrMany>,
    /// Noise variance per band; exclusive with `snr_db`.
    pub sigma2: Option<f64>,
    pub snr_db: Option<f64>,
    pub prior_sweeps: Option<usize>,
    pub seed: Option<u64>,
}

/// Sampler parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnmixConfig {
    pub nmc: Option<usize>,
    pub nbi: Option<usize>,
    pub seed: Option<u64>,
    pub beta: Option<OneOrMany>,
    pub beta_auto: Option<bool>,
    pub thin: Option<usize>,
    pub tmg_sweeps: Option<usize>,
    pub schedule: Option<String>,
    pub gamma: Option<f64>,
    pub nu: Option<f64>,
}

/// Baseline solver parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: Option<String>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
}

/// Reads a config file. A manifest is accepted too: its `config` table is used.
pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let value = match table.get("config") {
        Some(toml::Value::Table(t)) if table.contains_key("command") => toml::Value::Table(t.clone()),
        _ => toml::Value::Table(table),
    };
    value.try_into().map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Record of a run, written next to its outputs.
///
/// Contains no timings, so repeating a run reproduces it byte for byte;
/// timings go to a separate file named in `timings`.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: String,
    pub version: String,
    pub timings: String,
    pub inputs: BTreeMap<String, String>,
    pub config: C,
    pub outputs: BTreeMap<String, String>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &str, config: C) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timings: TIMINGS_FILE.to_string(),
            inputs: BTreeMap::new(),
            config,
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, key: &str, name: &str) {
        self.outputs.insert(key.to_string(), name.to_string());
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = toml::to_string(self).map_err(|e| usage(format!("manifest: {e}")))?;
        write_text(&dir.join(MANIFEST_FILE), &text)
    }
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TIMINGS_FILE: &str = "timings.toml";

pub fn write_timings(dir: &Path, entries: &[(&str, f64)]) -> CliResult<()> {
    let mut t = toml::Table::new();
    for (k, v) in entries {
        t.insert(format!("{k}_seconds"), toml::Value::Float(*v));
    }
    write_text(&dir.join(TIMINGS_FILE), &toml::to_string(&t).expect("float table serialises"))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}
