//! `key = value` settings with layered defaults, file values and flag
//! overrides, plus a stable hash of the resolved configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(command: &'static str, defaults: &[(&str, &str)]) -> Self {
        Self {
            command,
            values: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Overlays a config file. Blank lines and `#` comments are skipped;
    /// keys must be known to the command.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        self.parse_text(&text)
            .map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::usage(format!(
                "unknown key '{key}' for {} (known: {})",
                self.command,
                self.values.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("setting '{key}' has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::usage(format!("invalid {key} '{raw}': {e}")))
    }

    /// `none` or an empty value means unset.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            "" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::usage(format!("invalid {key} entry '{s}': {e}")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    /// Sorted `key = value` lines, the input to [`Settings::hash`].
    pub fn canonical(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Provenance header lines, each prefixed with `prefix`.
    pub fn provenance(&self, prefix: &str) -> Result<String, CliError> {
        Ok(format!(
            "{prefix}config_hash = {}\n{prefix}seed = {}\n",
            self.hash(),
            self.seed()?
        ))
    }

    /// Writes `<path>.meta` next to a binary artifact.
    pub fn write_meta(&self, artifact: &Path) -> Result<(), CliError> {
        let mut meta = artifact.as_os_str().to_owned();
        meta.push(".meta");
        let body = format!("{}{}", self.provenance("")?, self.canonical());
        std::fs::write(&meta, body).map_err(|e| {
            CliError::data(format!("cannot write {}: {e}", Path::new(&meta).display()))
        })
    }
}
