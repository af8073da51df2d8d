//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat only
//! when the consumer accepts repeats (e.g. `inject`). Command-line overrides
//! (`--set key=value`) are appended after the file entries and win.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// 1-based line in the source file, 0 for command-line overrides.
    pub line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: Vec<Entry>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                key: line.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config {
                    line: i + 1,
                    key: String::new(),
                    msg: "empty key".into(),
                });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: i + 1,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            key: assignment.to_string(),
            msg: "override must be `key=value`".into(),
        })?;
        self.entries.push(Entry {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: 0,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// The entries whose key is in `keys`, lines preserved.
    pub fn restricted(&self, keys: &[&str]) -> KvConfig {
        KvConfig {
            entries: self
                .entries
                .iter()
                .filter(|e| keys.contains(&e.key.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Rejects any key not in `known`, naming the offending key and line.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for e in &self.entries {
            if !known.contains(&e.key.as_str()) {
                return Err(Error::Config {
                    line: e.line,
                    key: e.key.clone(),
                    msg: "unknown key".into(),
                });
            }
        }
        Ok(())
    }

    fn last(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.last(key).map(|e| e.value.as_str())
    }

    /// Parses the last value of `key`, or returns `default` when absent.
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get_opt(key)?.unwrap_or(default))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.last(key)
            .map(|e| {
                e.value.parse().map_err(|err: T::Err| Error::Config {
                    line: e.line,
                    key: e.key.clone(),
                    msg: format!("cannot parse `{}`: {err}", e.value),
                })
            })
            .transpose()
    }

    /// Builds a config error pointing at the last occurrence of `key`.
    /// Rewrites a validation failure as a config error located at the first
    /// of `keys` the message mentions.
    pub fn attribute(&self, err: Error, keys: &[&str]) -> Error {
        match err {
            Error::InvalidArgument(msg) => {
                let key = keys.iter().find(|k| msg.contains(**k)).unwrap_or(&keys[0]);
                self.error_at(key, msg)
            }
            e => e,
        }
    }

    pub fn error_at(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::Config {
            line: self.last(key).map_or(0, |e| e.line),
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}
