//! Flat `key=value` configuration files layered under command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{usage, CliResult};

/// Effective settings of one run. Every value read is recorded in the
/// snapshot, so a manifest written from it can be fed back with `--config`.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    read: BTreeSet<String>,
    snapshot: BTreeMap<String, String>,
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped and a
/// repeated key keeps its last value.
pub fn parse_config(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value, got `{line}`", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(usage(format!("config line {}: empty key", i + 1)));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text)?
            }
        };
        Ok(Self {
            file,
            ..Self::default()
        })
    }

    fn parse<T>(&self, key: &str, raw: &str) -> CliResult<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        raw.parse().map_err(|e| usage(format!("config `{key}`: {e}")))
    }

    fn record(&mut self, key: &str, value: String) {
        self.read.insert(key.to_string());
        self.snapshot.insert(key.to_string(), value);
    }

    /// Flag value, else config value, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => self.parse(key, raw)?,
                None => default,
            },
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.read.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(self.parse(key, raw)?),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.record(key, v.to_string());
        }
        Ok(v)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| usage(format!("missing required setting `--{key}`")))
    }

    /// Boolean switch: a flag on the command line forces `true`.
    pub fn switch(&mut self, key: &str, flag: bool) -> CliResult<bool> {
        self.get(key, flag.then_some(true), false)
    }

    /// Comma-separated list.
    pub fn list<T>(&mut self, key: &str, flag: Vec<T>, default: Vec<T>) -> CliResult<Vec<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = if !flag.is_empty() {
            flag
        } else {
            match self.file.get(key) {
                Some(raw) => raw
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| self.parse(key, s))
                    .collect::<CliResult<Vec<T>>>()?,
                None => default,
            }
        };
        let joined: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        self.record(key, joined.join(","));
        Ok(v)
    }

    /// Rejects config keys the command never read.
    pub fn finish(&self) -> CliResult {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.read.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.snapshot
    }
}
