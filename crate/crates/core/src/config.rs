//! Flat `key=value` configuration text.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io_util::LineReader;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut reader = LineReader::new(input);
        let mut kv = Self::new();
        while let Some((line, text)) = reader.next_line()? {
            let (k, v) = text
                .split_once('=')
                .ok_or_else(|| Error::parse(line, format!("expected key=value, got '{text}'")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(line, "empty key"));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }

    /// Parses a single `key=value` override.
    pub fn parse_override(text: &str) -> Result<(String, String)> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value, got '{text}'")))?;
        if k.trim().is_empty() {
            return Err(Error::invalid("empty key"));
        }
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::invalid(format!("missing required key '{key}'")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::invalid(format!("invalid value '{v}' for key '{key}'")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?;
        Ok(self.get(key)?.expect("present"))
    }

    /// Whitespace-separated list of numbers.
    pub fn get_vec(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| {
                v.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::invalid(format!("invalid value '{v}' for key '{key}'")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for (k, v) in &self.entries {
            writeln!(out, "{k}={v}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}
