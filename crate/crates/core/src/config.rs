//! Plain-text `key=value` configuration files.
//!
//! One entry per line; `#` starts a comment; whitespace around keys and
//! values is ignored. Later duplicates override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("<config>", format!("line {}: expected key=value", n + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format("<config>", format!("line {}: empty key", n + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Config { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::InvalidParameter(format!("cannot parse {key}={v}")))
            })
            .transpose()
    }

    /// Comma-separated list of numbers.
    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key).map(|v| parse_list(v)).transpose()
    }
}

pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("'{s}' is not a number")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries() {
        let c = Config::parse_str("a=1\n  b = x y  # trailing\n\n#c=3\na=2").unwrap();
        assert_eq!(c.get("a"), Some("2"));
        assert_eq!(c.get("b"), Some("x y"));
        assert_eq!(c.get("c"), None);
        assert_eq!(c.parse::<u32>("a").unwrap(), Some(2));
        assert!(c.parse::<u32>("b").is_err());
        assert!(Config::parse_str("novalue").is_err());
        assert_eq!(parse_list("1, 2.5,3").unwrap(), vec![1.0, 2.5, 3.0]);
    }
}
