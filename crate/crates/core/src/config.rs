//! Flat `key=value` text files: one pair per line, `#` comments, blank lines
//! ignored, every key at most once.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, format!("expected key=value, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(source, i + 1, "empty key"));
            }
            if entries.insert(k.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(source, i + 1, format!("duplicate key {k:?}")));
            }
        }
        Ok(KeyValues { entries, source: source.to_string() })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    /// Parses `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::parse(self.source.as_str(), *line, format!("invalid value {v:?} for {key}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key outside `allowed` (prefix match when the entry
    /// ends with `.`).
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            let ok = allowed.iter().any(|a| if a.ends_with('.') { k.starts_with(a) } else { k == a });
            if !ok {
                return Err(Error::parse(self.source.as_str(), *line, format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        KeyValues { entries, source: self.source.clone() }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, (_, v))| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_read() {
        let kv = KeyValues::parse("# c\nlr = 0.5\n\ntrain.epochs=3\n", "cfg").unwrap();
        let mut lr = 0.0f64;
        kv.read_into("lr", &mut lr).unwrap();
        assert_eq!(lr, 0.5);
        assert_eq!(kv.section("train.").parsed::<usize>("epochs").unwrap(), Some(3));
        assert!(kv.reject_unknown(&["lr"]).is_err());
        assert!(kv.reject_unknown(&["lr", "train."]).is_ok());
    }

    #[test]
    fn errors_carry_line_numbers() {
        match KeyValues::parse("a=1\nnot a pair\n", "f.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(KeyValues::parse("a=1\na=2\n", "f").is_err());
        let kv = KeyValues::parse("a=x\n", "f").unwrap();
        assert!(kv.parsed::<f64>("a").is_err());
    }
}
