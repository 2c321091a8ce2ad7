//! Flag defaults from a TOML config file. Keys use the long flag names;
//! entries under a table named after the subcommand override top-level ones.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Bad flags or config values; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const SUBCOMMANDS: [&str; 4] = ["gen-data", "train", "evaluate", "diagnose"];

#[derive(Debug, Default)]
pub struct Settings {
    values: Table,
}

impl Settings {
    pub fn load(path: Option<&Path>, subcommand: &str) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Settings::parse(&text, subcommand).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn parse(text: &str, subcommand: &str) -> std::result::Result<Self, String> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
        let mut values = Table::new();
        let mut section = None;
        for (k, v) in table {
            match v {
                Value::Table(t) if SUBCOMMANDS.contains(&k.as_str()) => {
                    if k == subcommand {
                        section = Some(t);
                    }
                }
                Value::Table(_) => return Err(format!("unknown section `{k}`")),
                other => {
                    values.insert(k, other);
                }
            }
        }
        values.extend(section.unwrap_or_default());
        Ok(Settings { values })
    }

    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for k in self.values.keys() {
            if !known.contains(&k.as_str()) {
                return Err(UsageError(format!("unknown config key `{k}`")).into());
            }
        }
        Ok(())
    }

    /// The flag value if given, else the config value.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e: toml::de::Error| UsageError(format!("config key `{key}`: {}", e.message())).into()),
        }
    }

    pub fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.pick(flag, key)?
            .ok_or_else(|| UsageError(format!("missing required --{key}")).into())
    }
}
