//! Plain-text `key = value` configuration files.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys are
//! unique within a file.

use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(config_err!("line {}: empty key", lineno + 1));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(config_err!("line {}: duplicate key {key:?}", lineno + 1));
            }
            entries.push((key, value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Pairs whose key starts with `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvFile {
        KvFile {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
                .collect(),
        }
    }
}

/// A configuration record that can be read from and written to a [`KvFile`].
pub trait KvConfig: Sized {
    /// Sets one field; unknown keys are configuration errors.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn pairs(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()>;

    fn apply(&mut self, kv: &KvFile) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    fn to_kv_string(&self) -> String {
        self.to_kv_with_prefix("")
    }

    fn to_kv_with_prefix(&self, prefix: &str) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{prefix}{k} = {v}\n"))
            .collect()
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("invalid value {value:?} for {key}"))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(config_err!("invalid boolean {value:?} for {key}")),
    }
}
