//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Environment and experiment settings share a single file; each consumer
//! pulls the keys it knows about and the CLI rejects keys nobody claims.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", idx + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", idx + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key `{key}`: `{raw}` is not a valid {kind}"))
            }),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parsed(key, "number")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parsed(key, "non-negative integer")
    }

    pub fn get_u32(&self, key: &str) -> Result<Option<u32>> {
        self.parsed(key, "non-negative integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parsed(key, "non-negative integer")
    }

    /// Comma-separated list of numbers, e.g. `p_values = 0, 1, 2, 3, 4`.
    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    part.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!("key `{key}`: `{part}` is not a number"))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Rejects any key outside the given set.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments_comments_and_blanks() {
        let cfg = Config::parse("# header\nv_max = 20\n\ndt = 0.1 # trailing\n").unwrap();
        assert_eq!(cfg.get_f64("v_max").unwrap(), Some(20.0));
        assert_eq!(cfg.get_f64("dt").unwrap(), Some(0.1));
        assert_eq!(cfg.get_f64("missing").unwrap(), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("= 3\n").is_err());
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("dt = fast\n").unwrap().get_f64("dt").is_err());
    }

    #[test]
    fn parses_lists_and_flags_unknown_keys() {
        let cfg = Config::parse("p_values = 0, 1, 2.5\n").unwrap();
        assert_eq!(cfg.get_f64_list("p_values").unwrap().unwrap(), vec![0.0, 1.0, 2.5]);
        assert!(cfg.check_known(&["p_values"]).is_ok());
        assert!(cfg.check_known(&["other"]).is_err());
    }
}
