//! `key=value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Several config structs can read from the same file; each key records
//! whether anybody consumed it so front ends can reject typos.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if kv.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(kv)
    }

    /// Adds or replaces a setting (command-line overrides).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Config(format!("invalid item {s:?} in {key}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn unused_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KvFile::parse("# comment\nmask_count = 8\n\nattention_kernels=3, 5,7 # trailing\n").unwrap();
        assert_eq!(kv.parsed::<usize>("mask_count").unwrap(), Some(8));
        assert_eq!(kv.list::<usize>("attention_kernels").unwrap(), Some(vec![3, 5, 7]));
        assert_eq!(kv.parsed::<usize>("missing").unwrap(), None);
        assert!(kv.unused_keys().is_empty());
    }

    #[test]
    fn reports_errors_and_unused_keys() {
        assert!(KvFile::parse("novalue\n").is_err());
        assert!(KvFile::parse("a=1\na=2\n").is_err());
        let kv = KvFile::parse("tau=abc\nmask_cuont=3").unwrap();
        assert!(kv.parsed::<f64>("tau").is_err());
        assert_eq!(kv.unused_keys(), vec!["mask_cuont".to_string()]);
    }
}
