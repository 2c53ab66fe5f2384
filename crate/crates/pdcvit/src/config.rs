//! Flat `key = value` config files. Values layer as: built-in defaults,
//! then the config file, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed config file. Readers remove entries as they consume them so
/// unknown keys can be reported.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("config line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Usage(format!("config line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.to_string());
        }
        Ok(ConfigMap { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Usage(format!("config key '{key}': cannot parse '{v}'"))),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(Some(true)),
                "false" | "0" | "no" => Ok(Some(false)),
                _ => Err(Error::Usage(format!("config key '{key}': cannot parse '{v}' as bool"))),
            },
        }
    }

    /// Errors if any keys were never consumed (catches typos).
    pub fn ensure_consumed(&self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(|s| s.as_str()).collect();
            Err(Error::Usage(format!("unknown config keys: {}", keys.join(", "))))
        }
    }
}

/// Layering helper: built-in default, overridden by config file, overridden
/// by an explicit flag.
pub fn layer<T>(builtin: T, config: Option<T>, flag: Option<T>) -> T {
    flag.or(config).unwrap_or(builtin)
}

/// Key/value text emitter, the same shape `ConfigMap::parse` reads.
#[derive(Debug, Default)]
pub struct ConfigWriter {
    lines: Vec<String>,
}

impl ConfigWriter {
    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    pub fn finish(self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }
}
