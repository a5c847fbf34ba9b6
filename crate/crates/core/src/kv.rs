//! `key = value` text files with optional `[section]` headers.
//!
//! Keys inside a section are addressed as `section.key`. `#` starts a
//! comment line. Keys may repeat; [`KeyValues::get`] returns the last
//! occurrence and [`KeyValues::all`] every one in file order.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    origin: String,
    /// (key, line number, value)
    entries: Vec<(String, usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: i + 1,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            entries.push((key, i + 1, v.trim().to_string()));
        }
        Ok(Self { origin: origin.into(), entries })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    fn entry(&self, key: &str) -> Option<(usize, &str)> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, l, v)| (*l, v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|(_, v)| v)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _, _)| k == key)
            .map(|(_, l, v)| (*l, v.as_str()))
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::MissingKey { path: self.origin.clone(), key: key.into() })
    }

    pub fn parse_error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.origin.clone(), line, message: message.into() }
    }

    fn convert<T: FromStr>(&self, key: &str, line: usize, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| self.parse_error(line, format!("{key}: cannot parse {v:?}")))
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<T> {
        let (line, v) = self
            .entry(key)
            .ok_or_else(|| Error::MissingKey { path: self.origin.clone(), key: key.into() })?;
        self.convert(key, line, v)
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            Some((line, v)) => self.convert(key, line, v).map(Some),
            None => Ok(None),
        }
    }

    /// Whitespace-separated numbers; `n` of them when `Some`.
    pub fn numbers_at(&self, key: &str, line: usize, v: &str, n: Option<usize>) -> Result<Vec<f64>> {
        let out: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse).collect();
        match out {
            Ok(o) if n.is_none_or(|n| o.len() == n) => Ok(o),
            _ => Err(self.parse_error(
                line,
                match n {
                    Some(n) => format!("{key}: expected {n} numbers"),
                    None => format!("{key}: expected numbers"),
                },
            )),
        }
    }

    pub fn numbers(&self, key: &str, n: usize) -> Result<Vec<f64>> {
        let (line, v) = self
            .entry(key)
            .ok_or_else(|| Error::MissingKey { path: self.origin.clone(), key: key.into() })?;
        self.numbers_at(key, line, v, Some(n))
    }
}
