//! Flat `key = value` configuration files and the resolution order
//! flag/environment → config file → built-in default.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use kgsel_core::ModelKind;

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        out.insert(key, v.trim().to_owned());
    }
    Ok(out)
}

/// A value that can come from a config file and be echoed back.
pub trait Setting: Sized {
    fn parse_setting(s: &str) -> Result<Self>;
    fn show(&self) -> String;
    /// Paths are echoed but kept out of the hashed run settings, so the
    /// same run written to a different directory hashes the same.
    fn is_path() -> bool {
        false
    }
}

macro_rules! from_str_setting {
    ($($t:ty),*) => {$(
        impl Setting for $t {
            fn parse_setting(s: &str) -> Result<Self> {
                <$t>::from_str(s).map_err(|e| anyhow!("{e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_setting!(u64, usize, f64, bool, String, ModelKind);

impl Setting for PathBuf {
    fn parse_setting(s: &str) -> Result<Self> {
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
    fn is_path() -> bool {
        true
    }
}

#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
    hashed: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            ..Self::default()
        }
    }

    fn record<T: Setting>(&mut self, key: &str, v: &T) {
        let shown = v.show();
        if !T::is_path() {
            self.hashed.insert(key.to_owned(), shown.clone());
        }
        self.resolved.insert(key.to_owned(), shown);
    }

    pub fn optional<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self
                .file
                .get(key)
                .map(|s| T::parse_setting(s).with_context(|| format!("config key `{key}`")))
                .transpose()?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    pub fn value<T: Setting>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    pub fn required<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.optional(key, flag)?
            .ok_or_else(|| anyhow!("missing required option --{key}"))
    }

    /// Every resolved value, in key order.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// Resolved non-path values; these are stored in (and hashed into)
    /// checkpoints.
    pub fn hashed(&self) -> &BTreeMap<String, String> {
        &self.hashed
    }

    pub fn echo(&self) -> String {
        let body: Vec<String> = self.resolved.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("config: {}", body.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let file = parse_config("# run\nseed = 7\nlearning_rate=0.5\n\nvocab = v.txt\n").unwrap();
        let mut r = Resolver::new(file);
        assert_eq!(r.value("seed", Some(3u64), 0).unwrap(), 3);
        assert_eq!(r.value("learning-rate", None, 0.001).unwrap(), 0.5);
        assert_eq!(r.value("batch-size", None, 64usize).unwrap(), 64);
        assert_eq!(r.required::<PathBuf>("vocab", None).unwrap(), PathBuf::from("v.txt"));
        assert!(r.required::<PathBuf>("index", None).is_err());
        assert_eq!(r.echo(), "config: batch-size=64 learning-rate=0.5 seed=3 vocab=v.txt");
        assert!(!r.hashed().contains_key("vocab"));
    }

    #[test]
    fn bad_lines() {
        assert!(parse_config("novalue\n").is_err());
        let mut r = Resolver::new(parse_config("seed = x").unwrap());
        assert!(r.value("seed", None, 0u64).is_err());
    }
}
