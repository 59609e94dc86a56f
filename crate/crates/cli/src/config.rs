//! `key = value` run configuration merged from a file and flags.

use std::collections::BTreeMap;
use std::path::Path;

use crate::Failure;

/// Effective settings of one command, in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Parse `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("config line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Merge `defaults`, then the optional config file, then flags. Keys
    /// outside `allowed` are rejected.
    pub fn build(
        allowed: &[&str],
        defaults: &[(&str, String)],
        file: Option<&Path>,
        flags: Vec<(String, String)>,
    ) -> Result<Self, Failure> {
        let mut values: BTreeMap<String, String> = defaults.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let mut user = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            user.extend(parse_lines(&text)?);
        }
        user.extend(flags);
        for (k, v) in user {
            if !allowed.contains(&k.as_str()) {
                return Err(Failure::usage(format!("unknown config key `{k}`")));
            }
            values.insert(k, v);
        }
        Ok(Self { values })
    }

    /// Parse `--set key=value` arguments.
    pub fn split_sets(sets: &[String]) -> Result<Vec<(String, String)>, Failure> {
        sets.iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Failure::usage(format!("--set expects key=value, got `{s}`")))
            })
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, Failure> {
        let v = self.get(key).ok_or_else(|| Failure::usage(format!("missing value for `{key}`")))?;
        v.parse().map_err(|_| Failure::usage(format!("bad value `{v}` for `{key}`")))
    }

    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        self.get(key).map(|_| self.parse(key)).transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool, Failure> {
        Ok(self.parse_opt(key)?.unwrap_or(false))
    }

    /// The effective configuration as re-readable `key = value` lines.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
